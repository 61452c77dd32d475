//! Two-tower transformer forecaster for daily stock prices, built on a
//! small reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up: [`tensor`] holds dense arrays and the
//! gradient tape, [`data`] loads and windows OHLCV bars, [`model`] defines
//! the network, [`training`] fits it, and [`evaluation`] scores forecasts
//! and backtests a long/short strategy on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod evaluation;
pub mod fmt;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

//! The forecasting network.
//!
//! A `t_x × 6` window is cut into `n_t` segments. The time tower embeds
//! the raw segments and mixes them with causal (recursive) kernelized
//! attention; the frequency tower embeds each segment's per-channel real
//! DFT and mixes with non-causal linear attention. After every block the
//! tokens are merged pairwise, and each tower emits the concatenation of
//! all its block outputs. Both tower outputs are concatenated and an MLP
//! decoder emits the whole `t_y`-step horizon in one shot.

mod config;
pub mod layers;
pub mod params;

pub use config::HidformerConfig;
pub use layers::{
    embed_freq, embed_time, forward, forward_traced, linear_attention, merge_segments,
    recursive_attention, segment_tokens, tower_forward, AttentionKind, ForwardTrace, TowerOutput,
    ATTENTION_EPS,
};
pub use params::{init_params, layout, BoundParams, ModelParams, ParamTree};

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("parameter layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelParams {
    /// Predicts `t_y` normalized closes for one window, without gradients.
    pub fn predict(&self, window: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let w = tape.constant(window.clone());
        let out = forward(&tape, w, &bound.tree, &self.config)?;
        Ok(tape.value(out))
    }

    /// Predicts a `B × t_y` matrix for `B` windows.
    pub fn predict_batch(&self, windows: &[Tensor]) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let mut data = Vec::with_capacity(windows.len() * self.config.t_y);
        for window in windows {
            let w = tape.constant(window.clone());
            let out = forward(&tape, w, &bound.tree, &self.config)?;
            data.extend_from_slice(tape.value(out).data());
        }
        Ok(Tensor::matrix(windows.len(), self.config.t_y, data)?)
    }
}

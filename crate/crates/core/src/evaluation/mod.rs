//! Accuracy metrics, the long/short backtest and its risk figures,
//! Mann-Whitney U, multi-run aggregation and the persistence baseline.

mod backtest;
mod export;
mod mann_whitney;
mod pipeline;

pub use backtest::{
    backtest, directions, max_drawdown, net_value, risk_metrics, strategy_returns, BacktestReport,
    RiskMetrics, TRADING_DAYS,
};
pub use export::{
    write_backtest_csv, write_metrics_csv, write_predictions_csv, MetricsRow, BACKTEST_HEADER,
    METRICS_HEADER, PREDICTIONS_HEADER,
};
pub use mann_whitney::{mann_whitney_u, mann_whitney_u_with, MannWhitney, Method, EXACT_LIMIT};
pub use pipeline::{evaluate, BacktestSeries, Evaluation, Predictor};

pub use crate::config::MetricsScale;

use thiserror::Error;

use crate::data::{CHANNELS, CLOSE_CHANNEL};
use crate::model::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0} needs a nonempty input")]
    Empty(&'static str),
    #[error("nonpositive price {price} at index {index}")]
    Domain { index: usize, price: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyMetrics {
    pub mae: f64,
    pub mse: f64,
    /// Percent; `None` when some truth value is zero.
    pub mape: Option<f64>,
    /// Truth values equal to zero, which leave MAPE undefined.
    pub zero_truths: usize,
}

pub fn accuracy(pred: &[f64], truth: &[f64]) -> Result<AccuracyMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("accuracy"));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let mut zero_truths = 0;
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if *y == 0.0 {
            zero_truths += 1;
        } else {
            pct += e.abs() / y.abs();
        }
    }
    Ok(AccuracyMetrics {
        mae: abs / n,
        mse: sq / n,
        mape: (zero_truths == 0).then(|| 100.0 * pct / n),
        zero_truths,
    })
}

/// Repeats the window's last normalized close `t_y` times.
pub fn persistence_baseline(window: &Tensor, t_y: usize) -> Tensor {
    assert!(
        window.rank() == 2 && window.shape()[1] == CHANNELS && window.shape()[0] > 0,
        "persistence_baseline needs a t_x × {CHANNELS} window"
    );
    let last = window.data()[window.len() - CHANNELS + CLOSE_CHANNEL];
    Tensor::vector(vec![last; t_y])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunAggregate {
    pub mean: f64,
    /// Sample standard deviation over `√k`.
    pub standard_error: f64,
    pub k: usize,
    /// Set when `k == 1`, where the standard error is reported as 0.
    pub single_run: bool,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, EvalError> {
    let k = values.len();
    if k == 0 {
        return Err(EvalError::Empty("aggregate_runs"));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let standard_error = if k == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        var.sqrt() / (k as f64).sqrt()
    };
    Ok(RunAggregate {
        mean,
        standard_error,
        k,
        single_run: k == 1,
    })
}

//! Horizon-weighted MSE, Adam, and the seeded mini-batch loop that keeps
//! the parameters scoring best on a held-out tail of the training windows.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::WindowedDataset;
use crate::fmt::format_f64;
use crate::model::{forward, init_params, HidformerConfig, ModelError, ModelParams};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite selection loss after epoch {epoch}")]
    NonFiniteSelection { epoch: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Share of training windows (chronological tail) used to pick the
    /// best epoch.
    pub selection_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            selection_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..0.5).contains(&self.selection_fraction) {
            return err(format!(
                "selection_fraction must lie in [0, 0.5), got {}",
                self.selection_fraction
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0) {
            return err(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        Ok(())
    }
}

/// Horizon weights `t_y, t_y−1, …, 1` divided by their sum.
pub fn horizon_weights(t_y: usize) -> Vec<f64> {
    let total = (t_y * (t_y + 1) / 2) as f64;
    (0..t_y).map(|h| (t_y - h) as f64 / total).collect()
}

/// Weighted MSE on the tape; the first horizon step weighs `t_y`, the
/// last weighs 1.
pub fn weighted_mse(tape: &Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    let diff = tape.sub(pred, target)?;
    let shape = tape.shape(diff);
    if shape.len() != 1 {
        return Err(TensorError::Rank {
            op: "weighted_mse",
            expected: "1",
            shape,
        });
    }
    let weights = tape.constant(Tensor::vector(horizon_weights(shape[0])));
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    tape.sum(weighted)
}

/// [`weighted_mse`] on plain slices, without a tape.
pub fn weighted_mse_value(pred: &[f64], target: &[f64]) -> Result<f64, TensorError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_mse",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    Ok(horizon_weights(pred.len())
        .iter()
        .zip(pred.iter().zip(target))
        .map(|(w, (p, t))| w * (p - t) * (p - t))
        .sum())
}

/// Adam moments, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient
/// holds a non-finite value.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.tensors().len() || state.m.len() != grads.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors().len()
        )));
    }
    for ((name, p), g) in params.named().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                name: name.to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

/// Mean weighted MSE over `windows` and its gradient for every parameter.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    dataset: &WindowedDataset,
    windows: &[usize],
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut sum: Option<Var> = None;
    for &i in windows {
        let x = tape.constant(dataset.inputs[i].clone());
        let y = tape.constant(dataset.targets[i].clone());
        let pred = forward(&tape, x, &bound.tree, &params.config)?;
        let l = weighted_mse(&tape, pred, y)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let sum = sum.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    let loss = tape.scale(sum, 1.0 / windows.len() as f64)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grads = bound.vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    Ok((value, grads))
}

/// Mean weighted MSE of the model over a dataset, without gradients.
pub fn dataset_loss(params: &ModelParams, dataset: &WindowedDataset) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (x, y) in dataset.inputs.iter().zip(&dataset.targets) {
        let pred = params.predict(x)?;
        total += weighted_mse_value(pred.data(), y.data())?;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the epoch's batch losses.
    pub train_loss: f64,
    pub selection_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest selection loss, or the
    /// initial parameters when no epoch ran.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Window counts of the fitting part and the selection tail.
///
/// The tail holds `⌈fraction·n⌉` windows but never all of them. With a
/// zero fraction or a single window, selection reuses the fitting windows
/// and the tail is empty.
pub fn selection_split(n: usize, fraction: f64) -> (usize, usize) {
    if n <= 1 || fraction <= 0.0 {
        return (n, 0);
    }
    let tail = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    (n - tail, tail)
}

/// Trains a freshly initialized model (seeded by `model.seed`).
pub fn train(
    dataset: &WindowedDataset,
    model: &HidformerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params = init_params(model, model.seed)?;
    train_from(params, dataset, cfg)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    dataset: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (fit, tail) = selection_split(dataset.len(), cfg.selection_fraction);
    let selection = if tail == 0 {
        dataset.clone()
    } else {
        dataset.slice(fit..dataset.len())
    };
    let mut order: Vec<usize> = (0..fit).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // keep the shuffle stream apart from the initialization stream
    rng.set_stream(1);

    let mut state = OptimizerState::new(&params);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (batch, windows) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = match batch_loss_and_grad(&params, dataset, windows) {
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::NonFiniteLoss { epoch, batch })
                }
                r => r?,
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            adam_step(&mut params, &grads, &mut state, cfg)?;
            batch_losses.push(loss);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let selection_loss = match dataset_loss(&params, &selection) {
            Ok(l) if l.is_finite() => l,
            Err(ModelError::Tensor(TensorError::NonFinite { .. })) | Ok(_) => {
                return Err(TrainError::NonFiniteSelection { epoch })
            }
            Err(e) => return Err(e.into()),
        };
        log::debug!("epoch {epoch}: train {train_loss:.6e}, selection {selection_loss:.6e}");
        if selection_loss < best_loss {
            best_loss = selection_loss;
            best = params.clone();
            best_epoch = Some(epoch);
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            selection_loss,
        });
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,selection_loss";

pub fn write_history<W: Write>(mut out: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{}",
            r.epoch,
            format_f64(r.train_loss),
            format_f64(r.selection_loss)
        )?;
    }
    Ok(())
}

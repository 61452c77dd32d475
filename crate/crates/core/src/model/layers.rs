//! Building blocks of the two towers and the decoder, all recorded on a
//! [`Tape`] so the same code serves inference and training.

use super::params::{AttentionParams, BlockParams, Linear, Norm, ParamTree, TowerParams};
use super::{HidformerConfig, ModelError};
use crate::data::CHANNELS;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Added to every attention normalizer.
pub const ATTENTION_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention flavour used inside a tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Causal running-sum recurrence (time tower).
    Recursive,
    /// Every token attends to all tokens (frequency tower).
    Linear,
}

/// Splits a `t_x × 6` window into `n_t` contiguous, non-overlapping
/// segments of `(t_x / n_t) × 6`.
pub fn segment_tokens(window: &Tensor, n_t: usize) -> Result<Vec<Tensor>, ModelError> {
    if window.rank() != 2 || window.shape()[1] != CHANNELS {
        return Err(ModelError::Shape(format!(
            "window must be t_x × {CHANNELS}, got {:?}",
            window.shape()
        )));
    }
    let t_x = window.shape()[0];
    if n_t == 0 || !t_x.is_multiple_of(n_t) {
        return Err(ModelError::Config(format!(
            "n_t = {n_t} does not divide t_x = {t_x}"
        )));
    }
    let seg = t_x / n_t;
    Ok(window
        .data()
        .chunks(seg * CHANNELS)
        .map(|c| Tensor::matrix(seg, CHANNELS, c.to_vec()).expect("segment shape"))
        .collect())
}

fn linear(tape: &Tape, x: Var, p: &Linear<Var>) -> Result<Var, TensorError> {
    tape.affine(x, p.weight, p.bias)
}

fn norm(tape: &Tape, x: Var, p: &Norm<Var>) -> Result<Var, TensorError> {
    tape.layer_norm(x, p.gamma, p.beta, LAYER_NORM_EPS)
}

/// Flattens each segment of a `t_x × 6` window and maps it to `n_e`.
pub fn embed_time(
    tape: &Tape,
    window: Var,
    embed: &Linear<Var>,
    cfg: &HidformerConfig,
) -> Result<Var, TensorError> {
    // segments are contiguous row blocks, so a reshape flattens them
    let tokens = tape.reshape(window, &[cfg.n_t, cfg.time_features()])?;
    linear(tape, tokens, embed)
}

/// Real DFT of every channel of every segment (packed real|imag and
/// concatenated across channels), then mapped to `n_e`.
pub fn embed_freq(
    tape: &Tape,
    window: Var,
    embed: &Linear<Var>,
    cfg: &HidformerConfig,
) -> Result<Var, TensorError> {
    let seg = tape.reshape(window, &[cfg.n_t, cfg.segment_len(), CHANNELS])?;
    let by_channel = tape.transpose_last2(seg)?;
    let spectra = tape.rdft(by_channel)?;
    let tokens = tape.reshape(spectra, &[cfg.n_t, cfg.freq_features()])?;
    linear(tape, tokens, embed)
}

fn kernel_attention(
    tape: &Tape,
    tokens: Var,
    p: &AttentionParams<Var>,
    causal: bool,
) -> Result<Var, TensorError> {
    let q = tape.feature_map(linear(tape, tokens, &p.query)?)?;
    let k = tape.feature_map(linear(tape, tokens, &p.key)?)?;
    let v = linear(tape, tokens, &p.value)?;
    let mixed = tape.kernel_attention(q, k, v, causal, ATTENTION_EPS)?;
    linear(tape, mixed, &p.output)
}

/// Causal kernelized attention: token `t` sees only tokens `≤ t`.
pub fn recursive_attention(
    tape: &Tape,
    tokens: Var,
    p: &AttentionParams<Var>,
) -> Result<Var, TensorError> {
    kernel_attention(tape, tokens, p, true)
}

/// Non-causal kernelized attention over all tokens.
pub fn linear_attention(
    tape: &Tape,
    tokens: Var,
    p: &AttentionParams<Var>,
) -> Result<Var, TensorError> {
    kernel_attention(tape, tokens, p, false)
}

/// Fuses adjacent groups of `factor` tokens (the last group zero-padded)
/// and projects each group back to `n_e`. A single token passes through.
pub fn merge_segments(
    tape: &Tape,
    tokens: Var,
    p: &Linear<Var>,
    factor: usize,
) -> Result<Var, TensorError> {
    let shape = tape.shape(tokens);
    let (n, e) = (shape[0], shape[1]);
    if n <= 1 {
        return Ok(tokens);
    }
    let groups = n.div_ceil(factor);
    let padded = if groups * factor == n {
        tokens
    } else {
        tape.pad_rows(tokens, groups * factor)?
    };
    let grouped = tape.reshape(padded, &[groups, factor * e])?;
    linear(tape, grouped, p)
}

fn block_forward(
    tape: &Tape,
    x: Var,
    p: &BlockParams<Var>,
    kind: AttentionKind,
    factor: usize,
) -> Result<Var, TensorError> {
    let h = norm(tape, x, &p.norm1)?;
    let attended = match kind {
        AttentionKind::Recursive => recursive_attention(tape, h, &p.attention)?,
        AttentionKind::Linear => linear_attention(tape, h, &p.attention)?,
    };
    let x = tape.add(x, attended)?;
    let h = norm(tape, x, &p.norm2)?;
    let hidden = tape.relu(linear(tape, h, &p.ff_in)?)?;
    let x = tape.add(x, linear(tape, hidden, &p.ff_out)?)?;
    merge_segments(tape, x, &p.merge, factor)
}

/// Output of one tower.
#[derive(Debug, Clone)]
pub struct TowerOutput {
    /// Every block's post-merge tokens, flattened and concatenated.
    pub flat: Var,
    /// Token count after each block's merge.
    pub block_tokens: Vec<usize>,
}

/// Runs the tower's blocks in sequence; each block's merged output feeds
/// the next and is also kept for the concatenated tower output.
pub fn tower_forward(
    tape: &Tape,
    tokens: Var,
    p: &TowerParams<Var>,
    kind: AttentionKind,
    factor: usize,
) -> Result<TowerOutput, TensorError> {
    let mut x = tokens;
    let mut parts = Vec::with_capacity(p.blocks.len());
    let mut block_tokens = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        x = block_forward(tape, x, block, kind, factor)?;
        let shape = tape.shape(x);
        block_tokens.push(shape[0]);
        parts.push(tape.reshape(x, &[shape.iter().product()])?);
    }
    Ok(TowerOutput {
        flat: tape.concat(&parts)?,
        block_tokens,
    })
}

/// MLP over the concatenated tower outputs, ReLU between layers only.
pub fn decode(tape: &Tape, features: Var, layers: &[Linear<Var>]) -> Result<Var, TensorError> {
    let mut x = features;
    for (i, layer) in layers.iter().enumerate() {
        x = linear(tape, x, layer)?;
        if i + 1 < layers.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Everything [`forward`] computes, for callers that need the internals.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub prediction: Var,
    pub time: TowerOutput,
    pub freq: TowerOutput,
}

/// Full model on one `t_x × 6` window: both towers, concatenation and
/// the decoder, producing all `t_y` normalized closes at once.
pub fn forward_traced(
    tape: &Tape,
    window: Var,
    params: &ParamTree<Var>,
    cfg: &HidformerConfig,
) -> Result<ForwardTrace, ModelError> {
    let shape = tape.shape(window);
    if shape != [cfg.t_x, CHANNELS] {
        return Err(ModelError::Shape(format!(
            "expected window {}×{CHANNELS}, got {shape:?}",
            cfg.t_x
        )));
    }
    let time_tokens = embed_time(tape, window, &params.time.embed, cfg)?;
    let freq_tokens = embed_freq(tape, window, &params.freq.embed, cfg)?;
    let time = tower_forward(
        tape,
        time_tokens,
        &params.time,
        AttentionKind::Recursive,
        cfg.merge_factor,
    )?;
    let freq = tower_forward(
        tape,
        freq_tokens,
        &params.freq,
        AttentionKind::Linear,
        cfg.merge_factor,
    )?;
    let features = tape.concat(&[time.flat, freq.flat])?;
    let prediction = decode(tape, features, &params.decoder)?;
    Ok(ForwardTrace {
        prediction,
        time,
        freq,
    })
}

pub fn forward(
    tape: &Tape,
    window: Var,
    params: &ParamTree<Var>,
    cfg: &HidformerConfig,
) -> Result<Var, ModelError> {
    Ok(forward_traced(tape, window, params, cfg)?.prediction)
}

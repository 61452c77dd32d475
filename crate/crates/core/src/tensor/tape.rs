use std::cell::RefCell;
use std::f64::consts::TAU;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    FeatureMap(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rdft(Var),
    Reshape(Var),
    TransposeLast2(Var),
    Concat(Vec<Var>),
    PadRows(Var),
    KernelAttention {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        den: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::FeatureMap(a)
            | Op::Relu(a)
            | Op::Rdft(a)
            | Op::Reshape(a)
            | Op::TransposeLast2(a)
            | Op::PadRows(a) => vec![*a],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::KernelAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`.
    ///
    /// # Panics
    ///
    /// Panics if `v` was created without gradient tracking.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("variable {} does not require gradients", v.0))
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// `exp(2πi·m/n)` as `(cos, sin)`, exact at multiples of a quarter turn.
fn unit_root(m: usize, n: usize) -> (f64, f64) {
    let m = m % n;
    if (4 * m).is_multiple_of(n) {
        return match 4 * m / n {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
    }
    let (s, c) = (TAU * m as f64 / n as f64).sin_cos();
    (c, s)
}

fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|m| unit_root(m, n)).collect()
}

/// Number of frequency bins kept by the real DFT of a length-`n` signal.
pub(crate) fn rdft_bins(n: usize) -> usize {
    n / 2 + 1
}

fn rdft_forward(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let bins = rdft_bins(n);
    let rows = x.len() / n;
    let tw = twiddles(n);
    let mut out = vec![0.0; rows * 2 * bins];
    for r in 0..rows {
        let src = &x.data()[r * n..(r + 1) * n];
        let dst = &mut out[r * 2 * bins..(r + 1) * 2 * bins];
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in src.iter().enumerate() {
                let (c, s) = tw[(k * t) % n];
                re += v * c;
                im -= v * s;
            }
            dst[k] = re;
            dst[bins + k] = im;
        }
    }
    let mut shape = x.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = 2 * bins,
        None => shape.push(2 * bins),
    }
    Tensor::new(shape, out).expect("rdft shape")
}

fn rdft_backward(g: &Tensor, n: usize) -> Vec<f64> {
    let bins = rdft_bins(n);
    let rows = g.len() / (2 * bins);
    let tw = twiddles(n);
    let mut dx = vec![0.0; rows * n];
    for r in 0..rows {
        let gr = &g.data()[r * 2 * bins..(r + 1) * 2 * bins];
        for t in 0..n {
            let mut acc = 0.0;
            for k in 0..bins {
                let (c, s) = tw[(k * t) % n];
                acc += gr[k] * c - gr[bins + k] * s;
            }
            dx[r * n + t] = acc;
        }
    }
    dx
}

/// `a[m×k] · b[k×n]` on raw slices.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&b[p * n..(p + 1) * n])
            {
                *o += api * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn feature_map_value(u: f64) -> f64 {
    if u >= 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

fn feature_map_slope(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        u.exp()
    }
}

struct AttentionForward {
    out: Vec<f64>,
    den: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn kernel_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    dk: usize,
    dv: usize,
    causal: bool,
    eps: f64,
) -> AttentionForward {
    let mut state = vec![0.0; dk * dv];
    let mut norm = vec![0.0; dk];
    let absorb = |t: usize, state: &mut [f64], norm: &mut [f64]| {
        let kt = &k[t * dk..(t + 1) * dk];
        let vt = &v[t * dv..(t + 1) * dv];
        for a in 0..dk {
            norm[a] += kt[a];
            for b in 0..dv {
                state[a * dv + b] += kt[a] * vt[b];
            }
        }
    };
    if !causal {
        for t in 0..n {
            absorb(t, &mut state, &mut norm);
        }
    }
    let mut out = vec![0.0; n * dv];
    let mut den = vec![0.0; n];
    for t in 0..n {
        if causal {
            absorb(t, &mut state, &mut norm);
        }
        let qt = &q[t * dk..(t + 1) * dk];
        let d = qt.iter().zip(&norm).map(|(a, b)| a * b).sum::<f64>() + eps;
        den[t] = d;
        for b in 0..dv {
            let mut num = 0.0;
            for a in 0..dk {
                num += qt[a] * state[a * dv + b];
            }
            out[t * dv + b] = num / d;
        }
    }
    AttentionForward { out, den }
}

struct AttentionGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn kernel_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    den: &[f64],
    g: &[f64],
    n: usize,
    dk: usize,
    dv: usize,
    causal: bool,
) -> AttentionGrads {
    // per-step upstream terms: d(num_t) and d(den_t)
    let mut dnum = vec![0.0; n * dv];
    let mut dden = vec![0.0; n];
    for t in 0..n {
        let gt = &g[t * dv..(t + 1) * dv];
        let ot = &out[t * dv..(t + 1) * dv];
        for b in 0..dv {
            dnum[t * dv + b] = gt[b] / den[t];
        }
        dden[t] = -gt.iter().zip(ot).map(|(x, y)| x * y).sum::<f64>() / den[t];
    }

    let mut grad_q = vec![0.0; n * dk];
    let mut state = vec![0.0; dk * dv];
    let mut norm = vec![0.0; dk];
    let absorb = |t: usize, state: &mut [f64], norm: &mut [f64]| {
        let kt = &k[t * dk..(t + 1) * dk];
        let vt = &v[t * dv..(t + 1) * dv];
        for a in 0..dk {
            norm[a] += kt[a];
            for b in 0..dv {
                state[a * dv + b] += kt[a] * vt[b];
            }
        }
    };
    if !causal {
        for t in 0..n {
            absorb(t, &mut state, &mut norm);
        }
    }
    for t in 0..n {
        if causal {
            absorb(t, &mut state, &mut norm);
        }
        for a in 0..dk {
            let mut acc = dden[t] * norm[a];
            for b in 0..dv {
                acc += state[a * dv + b] * dnum[t * dv + b];
            }
            grad_q[t * dk + a] = acc;
        }
    }

    // Adjoint of the state and normalizer, accumulated from the last step
    // backwards (causal) or over all steps (non-causal).
    let mut adj_state = vec![0.0; dk * dv];
    let mut adj_norm = vec![0.0; dk];
    let collect = |t: usize, adj_state: &mut [f64], adj_norm: &mut [f64]| {
        let qt = &q[t * dk..(t + 1) * dk];
        for a in 0..dk {
            adj_norm[a] += dden[t] * qt[a];
            for b in 0..dv {
                adj_state[a * dv + b] += qt[a] * dnum[t * dv + b];
            }
        }
    };
    if !causal {
        for t in 0..n {
            collect(t, &mut adj_state, &mut adj_norm);
        }
    }
    let mut grad_k = vec![0.0; n * dk];
    let mut grad_v = vec![0.0; n * dv];
    for j in (0..n).rev() {
        if causal {
            collect(j, &mut adj_state, &mut adj_norm);
        }
        let kj = &k[j * dk..(j + 1) * dk];
        let vj = &v[j * dv..(j + 1) * dv];
        for a in 0..dk {
            let mut acc = adj_norm[a];
            for b in 0..dv {
                acc += adj_state[a * dv + b] * vj[b];
            }
            grad_k[j * dk + a] = acc;
        }
        for b in 0..dv {
            let mut acc = 0.0;
            for a in 0..dk {
                acc += adj_state[a * dv + b] * kj[a];
            }
            grad_v[j * dv + b] = acc;
        }
    }
    AttentionGrads {
        dq: grad_q,
        dk: grad_k,
        dv: grad_v,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        check_finite(op_name, &value)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(mismatch(name, x, y));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.record("add", value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.record("sub", value, Op::Sub(a, b))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.record("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.with1(a, |x| x.map(|v| v * c));
        self.record("scale", value, Op::Scale(a, c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let value = self.with1(a, |x| Tensor::scalar(x.data().iter().sum()));
        self.record("sum", value, Op::Sum(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.with2(a, b, |x, y| {
            if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(mismatch("matmul", x, y));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            Tensor::new(vec![m, n], gemm(x.data(), y.data(), m, k, n))
        })?;
        self.record("matmul", value, Op::MatMul(a, b))
    }

    /// `x · w + b` over the last axis of `x`, with `b` broadcast across
    /// all leading axes.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            if wv.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "affine",
                    expected: "2 (weight)",
                    shape: wv.shape().to_vec(),
                });
            }
            let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
            if xv.rank() == 0 || xv.last_dim() != d_in {
                return Err(mismatch("affine", xv, wv));
            }
            if bv.shape() != [d_out] {
                return Err(mismatch("affine", wv, bv));
            }
            let rows = xv.len() / d_in;
            let mut out = gemm(xv.data(), wv.data(), rows, d_in, d_out);
            for row in out.chunks_mut(d_out) {
                for (o, &bias) in row.iter_mut().zip(bv.data()) {
                    *o += bias;
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = d_out;
            Tensor::new(shape, out)?
        };
        self.record("affine", value, Op::Affine { x, w, b })
    }

    /// Elementwise `u + 1` for `u ≥ 0` and `exp(u)` below zero.
    pub fn feature_map(&self, x: Var) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| t.map(feature_map_value));
        self.record("feature_map", value, Op::FeatureMap(x))
    }

    pub fn relu(&self, x: Var) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| t.map(|u| u.max(0.0)));
        self.record("relu", value, Op::Relu(x))
    }

    /// Standardizes each last-axis row (population variance plus `eps`)
    /// and applies the `gamma`/`beta` scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[x.0].value,
                &nodes[gamma.0].value,
                &nodes[beta.0].value,
            );
            let d = xv.last_dim();
            if xv.rank() == 0 || gv.shape() != [d] || bv.shape() != [d] {
                return Err(mismatch("layer_norm", xv, gv));
            }
            let rows = xv.len() / d;
            let mut out = vec![0.0; xv.len()];
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    let h = (row[i] - mean) * is;
                    xhat[r * d + i] = h;
                    out[r * d + i] = gv.data()[i] * h + bv.data()[i];
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Unnormalized real DFT along the last axis. A length-`L` row becomes
    /// `2·(⌊L/2⌋+1)` values: the real parts of bins `0..=⌊L/2⌋` followed by
    /// their imaginary parts.
    pub fn rdft(&self, x: Var) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| {
            if t.last_dim() == 0 {
                return Err(TensorError::InvalidArgument("rdft of an empty axis".into()));
            }
            Ok(rdft_forward(t))
        })?;
        self.record("rdft", value, Op::Rdft(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| t.clone().reshape(shape))?;
        self.record("reshape", value, Op::Reshape(x))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self, x: Var) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| {
            if t.rank() < 2 {
                return Err(TensorError::Rank {
                    op: "transpose_last2",
                    expected: ">= 2",
                    shape: t.shape().to_vec(),
                });
            }
            let r = t.rank();
            let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
            let mut out = vec![0.0; t.len()];
            for (blk, src) in t.data().chunks(m * n.max(1)).enumerate() {
                let base = blk * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[base + j * m + i] = src[i * n + j];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, out)
        })?;
        self.record("transpose_last2", value, Op::TransposeLast2(x))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = match parts.first() {
                Some(p) => &nodes[p.0].value,
                None => return Err(TensorError::InvalidArgument("concat of nothing".into())),
            };
            if first.rank() == 0 {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: ">= 1",
                    shape: Vec::new(),
                });
            }
            let tail = &first.shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank() == 0 || &t.shape()[1..] != tail {
                    return Err(mismatch("concat", first, t));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)?
        };
        self.record("concat", value, Op::Concat(parts.to_vec()))
    }

    /// Appends zero rows along the first axis until it has `rows` entries.
    pub fn pad_rows(&self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let value = self.with1(x, |t| {
            if t.rank() == 0 || t.shape()[0] > rows {
                return Err(TensorError::InvalidArgument(format!(
                    "cannot pad shape {:?} to {rows} rows",
                    t.shape()
                )));
            }
            let mut shape = t.shape().to_vec();
            let row_len: usize = shape[1..].iter().product();
            shape[0] = rows;
            let mut data = t.data().to_vec();
            data.resize(rows * row_len, 0.0);
            Tensor::new(shape, data)
        })?;
        self.record("pad_rows", value, Op::PadRows(x))
    }

    /// Kernelized attention over already feature-mapped queries and keys.
    ///
    /// With `S_t = Σ φk_j v_jᵀ` and `z_t = Σ φk_j`, output row `t` is
    /// `(φq_tᵀ S_t) / (φq_tᵀ z_t + eps)`. When `causal` the sums run over
    /// `j ≤ t` and are built incrementally; otherwise they cover every row.
    pub fn kernel_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (value, den) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if qv.rank() != 2 || kv.shape() != qv.shape() {
                return Err(mismatch("kernel_attention", qv, kv));
            }
            if vv.rank() != 2 || vv.shape()[0] != qv.shape()[0] {
                return Err(mismatch("kernel_attention", qv, vv));
            }
            let (n, dk, dv) = (qv.shape()[0], qv.shape()[1], vv.shape()[1]);
            let fwd =
                kernel_attention_forward(qv.data(), kv.data(), vv.data(), n, dk, dv, causal, eps);
            (Tensor::new(vec![n, dv], fwd.out)?, fwd.den)
        };
        self.record(
            "kernel_attention",
            value,
            Op::KernelAttention {
                q,
                k,
                v,
                causal,
                den,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires gradients receives a buffer (zero when no
    /// path reaches it); contributions from multiple uses add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = nodes
            .iter()
            .map(|n| n.requires_grad.then(|| Tensor::zeros(n.value.shape())))
            .collect();
        if let Some(g) = grads[loss.0].as_mut() {
            g.data_mut()[0] = 1.0;
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("requires_grad node has a buffer");
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contrib: impl FnOnce(&mut [f64])) {
    if let Some(g) = grads[v.0].as_mut() {
        contrib(g.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, |d| add_into(d, gd));
            accumulate(grads, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, |d| add_into(d, gd));
            accumulate(grads, *b, |d| {
                for (x, y) in d.iter_mut().zip(gd) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * bv[i];
                }
            });
            accumulate(grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, *a, |d| {
            for (x, y) in d.iter_mut().zip(gd) {
                *x += c * y;
            }
        }),
        Op::Sum(a) => {
            let s = gd[0];
            accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a.0].requires_grad {
                let da = gemm_nt(gd, bv.data(), m, n, k);
                accumulate(grads, *a, |d| add_into(d, &da));
            }
            if nodes[b.0].requires_grad {
                let db = gemm_tn(av.data(), gd, m, k, n);
                accumulate(grads, *b, |d| add_into(d, &db));
            }
        }
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / d_in;
            if nodes[x.0].requires_grad {
                let dx = gemm_nt(gd, wv.data(), rows, d_out, d_in);
                accumulate(grads, *x, |d| add_into(d, &dx));
            }
            if nodes[w.0].requires_grad {
                let dw = gemm_tn(xv.data(), gd, rows, d_in, d_out);
                accumulate(grads, *w, |d| add_into(d, &dw));
            }
            accumulate(grads, *b, |d| {
                for row in gd.chunks(d_out) {
                    add_into(d, row);
                }
            });
        }
        Op::FeatureMap(x) => {
            let xv = val(x).data();
            accumulate(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * feature_map_slope(xv[i]);
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(x).data();
            accumulate(grads, *x, |d| {
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        d[i] += gd[i];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(gamma).data();
            let d = gv.len();
            accumulate(grads, *beta, |db| {
                for row in gd.chunks(d) {
                    add_into(db, row);
                }
            });
            accumulate(grads, *gamma, |dg| {
                for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        dg[i] += row[i] * hrow[i];
                    }
                }
            });
            accumulate(grads, *x, |dx| {
                for (r, (row, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let dh: Vec<f64> = row.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[r * d + i] += inv_std[r] * (dh[i] - mean_dh - hrow[i] * mean_dh_h);
                    }
                }
            });
        }
        Op::Rdft(x) => {
            let n = val(x).last_dim();
            let dx = rdft_backward(g, n);
            accumulate(grads, *x, |d| add_into(d, &dx));
        }
        Op::Reshape(x) => accumulate(grads, *x, |d| add_into(d, gd)),
        Op::TransposeLast2(x) => {
            // g has the swapped shape [.., n, m]; map back to [.., m, n]
            let r = g.rank();
            let (n, m) = (g.shape()[r - 2], g.shape()[r - 1]);
            accumulate(grads, *x, |d| {
                for (blk, src) in gd.chunks(m * n.max(1)).enumerate() {
                    let base = blk * m * n;
                    for i in 0..n {
                        for j in 0..m {
                            d[base + j * n + i] += src[i * m + j];
                        }
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(p).len();
                accumulate(grads, *p, |d| add_into(d, &gd[offset..offset + len]));
                offset += len;
            }
        }
        Op::PadRows(x) => {
            let len = val(x).len();
            accumulate(grads, *x, |d| add_into(d, &gd[..len]));
        }
        Op::KernelAttention {
            q,
            k,
            v,
            causal,
            den,
        } => {
            let (qv, kv, vv) = (val(q), val(k), val(v));
            let (n, dk, dv) = (qv.shape()[0], qv.shape()[1], vv.shape()[1]);
            let ag = kernel_attention_backward(
                qv.data(),
                kv.data(),
                vv.data(),
                node.value.data(),
                den,
                gd,
                n,
                dk,
                dv,
                *causal,
            );
            accumulate(grads, *q, |d| add_into(d, &ag.dq));
            accumulate(grads, *k, |d| add_into(d, &ag.dk));
            accumulate(grads, *v, |d| add_into(d, &ag.dv));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_zero_and_hand_values() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.constant(Tensor::eye(2));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);

        let col = tape.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let out = tape.matmul(m, col).unwrap();
        assert_eq!(tape.shape(out), vec![2, 1]);
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn affine_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 4.0, 0.5, 0.0]).unwrap());
        let eye = tape.constant(Tensor::eye(2));
        let zero_b = tape.constant(Tensor::zeros(&[2]));
        let out = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(out), tape.value(x));

        let zx = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 7.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let out = tape.affine(zx, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);

        let ones = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let out = tape.affine(ones, eye, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_rejects_wrong_width() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.affine(x, w, b).is_err());
    }

    #[test]
    fn feature_map_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 2.0, -1.0]));
        let y = tape.value(tape.feature_map(x).unwrap());
        approx(y.data(), &[1.0, 3.0, (-1.0f64).exp()], 0.0);
        assert!((y.data()[2] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::ones(&[3]));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::full(&[3], 4.2));
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        approx(tape.value(y).data(), &[1.0, -1.0], 1e-10);

        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, -2.0, 0.1, 0.2, 9.0]).unwrap());
        let beta = tape.constant(Tensor::vector(vec![0.5, -0.5, 2.0]));
        let y = tape.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 2.0, 0.5, -0.5, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        assert!(tape.layer_norm(x, x, x, 0.0).is_err());
    }

    #[test]
    fn rdft_hand_cases() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(tape.value(tape.rdft(z).unwrap()).data(), &[0.0; 6]);

        let c = tape.constant(Tensor::full(&[4], 2.5));
        assert_eq!(
            tape.value(tape.rdft(c).unwrap()).data(),
            &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );

        let cos = tape.constant(Tensor::vector(vec![1.0, 0.0, -1.0, 0.0]));
        assert_eq!(
            tape.value(tape.rdft(cos).unwrap()).data(),
            &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn rdft_packs_per_row() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape.rdft(x).unwrap();
        assert_eq!(tape.shape(y), vec![2, 4]);
        approx(&tape.value(y).data()[..4], &[3.0, 0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(sq).unwrap().wrt(x).item(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let twice = tape.add(x, x).unwrap();
        assert_eq!(tape.backward(twice).unwrap().wrt(x).item(), 2.0);

        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(7.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(p),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn transpose_and_pad() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = tape.transpose_last2(x).unwrap();
        assert_eq!(tape.shape(t), vec![3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let p = tape.pad_rows(x, 3).unwrap();
        assert_eq!(
            tape.value(p).data(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0]
        );
        assert!(tape.pad_rows(x, 1).is_err());
    }

    #[test]
    fn concat_checks_trailing_shape() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), vec![3, 2]);
        let bad = tape.constant(Tensor::ones(&[1, 3]));
        assert!(tape.concat(&[a, bad]).is_err());
    }

    #[test]
    fn kernel_attention_single_token_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::matrix(1, 2, vec![0.7, 1.3]).unwrap());
        let k = tape.constant(Tensor::matrix(1, 2, vec![2.0, 0.4]).unwrap());
        let v = tape.constant(Tensor::matrix(1, 3, vec![-1.0, 0.5, 3.0]).unwrap());
        for causal in [true, false] {
            let o = tape.kernel_attention(q, k, v, causal, 1e-8).unwrap();
            // exact up to the eps term in the denominator
            approx(tape.value(o).data(), &[-1.0, 0.5, 3.0], 1e-7);
        }
    }
}

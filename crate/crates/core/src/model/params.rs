//! Parameter layout, seeded initialization and tape binding.
//!
//! Parameters live in one flat, ordered list of named tensors. The
//! structured view ([`ParamTree`]) holds indices into that list, so the
//! optimizer, checkpoints and the forward pass all agree on one order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HidformerConfig, ModelError};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: Norm<T>,
    pub attention: AttentionParams<T>,
    pub norm2: Norm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub merge: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams<T> {
    pub embed: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTree<T> {
    pub time: TowerParams<T>,
    pub freq: TowerParams<T>,
    pub decoder: Vec<Linear<T>>,
}

impl<T> Linear<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: f(&format!("{name}.bias"), &self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&format!("{name}.gamma"), &self.gamma),
            beta: f(&format!("{name}.beta"), &self.beta),
        }
    }
}

impl<T> AttentionParams<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.map(&format!("{name}.query"), f),
            key: self.key.map(&format!("{name}.key"), f),
            value: self.value.map(&format!("{name}.value"), f),
            output: self.output.map(&format!("{name}.output"), f),
        }
    }
}

impl<T> BlockParams<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.map(&format!("{name}.norm1"), f),
            attention: self.attention.map(&format!("{name}.attention"), f),
            norm2: self.norm2.map(&format!("{name}.norm2"), f),
            ff_in: self.ff_in.map(&format!("{name}.ff_in"), f),
            ff_out: self.ff_out.map(&format!("{name}.ff_out"), f),
            merge: self.merge.map(&format!("{name}.merge"), f),
        }
    }
}

impl<T> TowerParams<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> TowerParams<U> {
        TowerParams {
            embed: self.embed.map(&format!("{name}.embed"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{name}.block{i}"), f))
                .collect(),
        }
    }
}

impl<T> ParamTree<T> {
    /// Applies `f` to every leaf in canonical order, passing its name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamTree<U> {
        ParamTree {
            time: self.time.map("time", &mut f),
            freq: self.freq.map("freq", &mut f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("decoder.layer{i}"), &mut f))
                .collect(),
        }
    }

    /// Leaf names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        names
    }
}

/// How a leaf is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Uniform in `±1/√fan_in`, where `fan_in` is the leading extent.
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn linear_spec(d_in: usize, d_out: usize) -> Linear<ParamSpec> {
    Linear {
        weight: ParamSpec {
            shape: vec![d_in, d_out],
            kind: ParamKind::Weight,
        },
        bias: ParamSpec {
            shape: vec![d_out],
            kind: ParamKind::Bias,
        },
    }
}

fn norm_spec(d: usize) -> Norm<ParamSpec> {
    Norm {
        gamma: ParamSpec {
            shape: vec![d],
            kind: ParamKind::Scale,
        },
        beta: ParamSpec {
            shape: vec![d],
            kind: ParamKind::Shift,
        },
    }
}

fn tower_spec(cfg: &HidformerConfig, features: usize) -> TowerParams<ParamSpec> {
    let e = cfg.n_e;
    TowerParams {
        embed: linear_spec(features, e),
        blocks: (0..cfg.n_b)
            .map(|_| BlockParams {
                norm1: norm_spec(e),
                attention: AttentionParams {
                    query: linear_spec(e, e),
                    key: linear_spec(e, e),
                    value: linear_spec(e, e),
                    output: linear_spec(e, e),
                },
                norm2: norm_spec(e),
                ff_in: linear_spec(e, cfg.d_ff),
                ff_out: linear_spec(cfg.d_ff, e),
                merge: linear_spec(cfg.merge_factor * e, e),
            })
            .collect(),
    }
}

/// Shapes and initialization kinds for every parameter of `cfg`.
pub fn layout(cfg: &HidformerConfig) -> ParamTree<ParamSpec> {
    let hidden = cfg.decoder_hidden();
    let decoder = (0..cfg.n_d)
        .map(|i| {
            let d_in = if i == 0 { cfg.decoder_input() } else { hidden };
            let d_out = if i + 1 == cfg.n_d { cfg.t_y } else { hidden };
            linear_spec(d_in, d_out)
        })
        .collect();
    ParamTree {
        time: tower_spec(cfg, cfg.time_features()),
        freq: tower_spec(cfg, cfg.freq_features()),
        decoder,
    }
}

/// All learned arrays of one model, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: HidformerConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: ParamTree<usize>,
}

impl ModelParams {
    /// Assembles parameters from named tensors that must match the layout
    /// of `config` exactly (same names, same order, same shapes).
    pub fn from_named(
        config: HidformerConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        let mut expected = Vec::new();
        let index = {
            let mut i = 0;
            specs.map(|name, spec| {
                expected.push((name.to_string(), spec.shape.clone()));
                i += 1;
                i - 1
            })
        };
        if named.len() != expected.len() {
            return Err(ModelError::Layout(format!(
                "expected {} arrays, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (ename, eshape)) in named.iter().zip(&expected) {
            if name != ename {
                return Err(ModelError::Layout(format!(
                    "expected array {ename}, found {name}"
                )));
            }
            if t.shape() != eshape.as_slice() {
                return Err(ModelError::Layout(format!(
                    "{name}: expected shape {eshape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Layout(format!(
                    "{name} holds non-finite values"
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Structured view holding indices into [`tensors`](Self::tensors).
    pub fn index(&self) -> &ParamTree<usize> {
        &self.index
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        self.bind_vars(vars)
    }

    /// Records parameters as constants, for inference without gradients.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        self.bind_vars(vars)
    }

    /// Structured view over caller-provided vars in canonical order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundParams {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        let tree = self.index.map(|_, &i| vars[i]);
        BoundParams { vars, tree }
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Vars in canonical order.
    pub vars: Vec<Var>,
    pub tree: ParamTree<Var>,
}

/// Seeded initialization: weights uniform in `±1/√fan_in`, biases and
/// shifts zero, scales one.
pub fn init_params(cfg: &HidformerConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    layout(cfg).map(|name, spec| {
        let t = match spec.kind {
            ParamKind::Weight => {
                let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                let n = spec.shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(spec.shape.clone(), data).expect("weight shape")
            }
            ParamKind::Bias | ParamKind::Shift => Tensor::zeros(&spec.shape),
            ParamKind::Scale => Tensor::ones(&spec.shape),
        };
        named.push((name.to_string(), t));
    });
    ModelParams::from_named(*cfg, named)
}

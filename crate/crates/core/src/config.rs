//! Flat `key=value` run configuration covering windowing, architecture
//! and training. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{StatsScope, WindowConfig};
use crate::fmt::format_f64;
use crate::model::{HidformerConfig, ModelError};
use crate::training::TrainConfig;

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 17] = [
    "t_x",
    "t_y",
    "stride",
    "n_t",
    "n_e",
    "n_b",
    "n_d",
    "d_ff",
    "merge_factor",
    "batch_size",
    "learning_rate",
    "epochs",
    "split_fraction",
    "selection_fraction",
    "seed",
    "stats_scope",
    "metrics_scale",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// Scale on which accuracy metrics are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsScale {
    /// Min-max normalized closes.
    Normalized,
    /// Closes mapped back to prices.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: HidformerConfig,
    pub stride: usize,
    pub train: TrainConfig,
    pub split_fraction: f64,
    pub stats_scope: StatsScope,
    pub metrics_scale: MetricsScale,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: HidformerConfig::default(),
            stride: 1,
            train: TrainConfig::default(),
            split_fraction: 0.95,
            stats_scope: StatsScope::Train,
            metrics_scale: MetricsScale::Normalized,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Defaults overridden by the `key=value` lines of `text`. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        match key {
            "t_x" => m.t_x = parse(key, value)?,
            "t_y" => m.t_y = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "n_t" => m.n_t = parse(key, value)?,
            "n_e" => m.n_e = parse(key, value)?,
            "n_b" => m.n_b = parse(key, value)?,
            "n_d" => m.n_d = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "merge_factor" => m.merge_factor = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "split_fraction" => self.split_fraction = parse(key, value)?,
            "selection_fraction" => self.train.selection_fraction = parse(key, value)?,
            "seed" => self.set_seed(parse(key, value)?),
            "stats_scope" => {
                self.stats_scope = match value {
                    "train" => StatsScope::Train,
                    "all" => StatsScope::All,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                        })
                    }
                }
            }
            "metrics_scale" => {
                self.metrics_scale = match value {
                    "normalized" => MetricsScale::Normalized,
                    "raw" => MetricsScale::Raw,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                        })
                    }
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// One seed drives both initialization and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "t_x" => m.t_x.to_string(),
            "t_y" => m.t_y.to_string(),
            "stride" => self.stride.to_string(),
            "n_t" => m.n_t.to_string(),
            "n_e" => m.n_e.to_string(),
            "n_b" => m.n_b.to_string(),
            "n_d" => m.n_d.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "merge_factor" => m.merge_factor.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => format_f64(self.train.learning_rate),
            "epochs" => self.train.epochs.to_string(),
            "split_fraction" => format_f64(self.split_fraction),
            "selection_fraction" => format_f64(self.train.selection_fraction),
            "seed" => m.seed.to_string(),
            "stats_scope" => match self.stats_scope {
                StatsScope::Train => "train".into(),
                StatsScope::All => "all".into(),
            },
            "metrics_scale" => match self.metrics_scale {
                MetricsScale::Normalized => "normalized".into(),
                MetricsScale::Raw => "raw".into(),
            },
            _ => return None,
        })
    }

    /// All keys, one `key=value` line each, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn differing_keys(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.into_iter()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            t_x: self.model.t_x,
            t_y: self.model.t_y,
            stride: self.stride,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| match e {
            ModelError::Config(m) => ConfigError::Invalid(m),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.stride == 0 {
            return Err(ConfigError::Invalid("stride must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("learning_rate", "0.01").unwrap();
        cfg.set("stats_scope", "all").unwrap();
        cfg.set("seed", "7").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 7);
        assert!(back.differing_keys(&RunConfig::default()).contains(&"seed"));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            RunConfig::parse("t_xx=3"),
            Err(ConfigError::UnknownKey("t_xx".into()))
        );
        assert!(matches!(
            RunConfig::parse("n_t 4"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("n_t=four"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("metrics_scale=log"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn comments_and_validation() {
        let cfg = RunConfig::parse("# toy\n\nn_t=3\n").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        RunConfig::default().validate().unwrap();
    }
}

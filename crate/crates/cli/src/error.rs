use std::fmt;
use std::path::Path;

use hidformer::config::ConfigError;
use hidformer::data::DataError;
use hidformer::evaluation::EvalError;
use hidformer::model::ModelError;
use hidformer::tensor::TensorError;
use hidformer::training::{CheckpointError, TrainError};

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    /// Unreadable, malformed or insufficient input, and I/O failures.
    Data = 1,
    Config = 2,
    /// Divergence or other non-finite arithmetic.
    Numeric = 3,
}

/// A one-line diagnostic: `error[module]: message`.
#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(status: ExitStatus, module: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            module,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.status as i32
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ExitStatus::Data, "io", format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.module, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::new(ExitStatus::Data, "data", e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(ExitStatus::Config, "config", e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::new(ExitStatus::Numeric, "tensor", e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => Self::new(ExitStatus::Config, "model", other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let status = match &e {
            TrainError::Model(m) => return m.clone().into(),
            TrainError::Config(_) => ExitStatus::Config,
            TrainError::EmptyDataset => ExitStatus::Data,
            TrainError::NonFiniteLoss { .. }
            | TrainError::NonFiniteSelection { .. }
            | TrainError::NonFiniteGradient { .. } => ExitStatus::Numeric,
        };
        Self::new(status, "training", e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Mismatch(_) => ExitStatus::Config,
            _ => ExitStatus::Data,
        };
        Self::new(status, "checkpoint", e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => Self::new(ExitStatus::Data, "evaluation", other.to_string()),
        }
    }
}

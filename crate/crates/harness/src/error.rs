use std::path::PathBuf;

use scicore_autograd::TensorError;
use scicore_core::ModelError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("all values are equal; min-max scaling is undefined")]
    DegenerateRange,
    #[error("metric `{0}` is not assigned to a capability dimension")]
    UngroupedMetric(String),
    #[error("empty list")]
    EmptyList,
    #[error("length mismatch: {pred} predictions vs {gold} references")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("scorecard needs at least 2 report sets, found {0}")]
    TooFewReports(usize),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal error: {0}")]
    Internal(String),
    /// The reader of stdout went away, e.g. `| head`.
    #[error("output closed")]
    ClosedOutput,
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Model(ModelError::Tensor(e))
    }
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, e: impl ToString) -> Self {
        HarnessError::Io {
            path: path.into(),
            reason: e.to_string(),
        }
    }

    /// 1 for bad input, 2 for failures inside the program.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Internal(_) => 2,
            HarnessError::ClosedOutput => 0,
            HarnessError::Model(e) => match e {
                ModelError::Tensor(TensorError::Checkpoint(_)) => 1,
                ModelError::Tensor(_)
                | ModelError::ShapeMismatch(_)
                | ModelError::WidthMismatch { .. }
                | ModelError::ConformerMismatch { .. } => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

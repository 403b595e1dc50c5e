use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HlsError>;

#[derive(Debug, Error)]
pub enum HlsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("softmax row {row} has every entry masked")]
    FullyMasked { row: usize },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: invalid sample {id:?}: {msg}")]
    Validation { line: usize, id: String, msg: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("function {0:?} has no non-blank lines")]
    EmptyFunction(String),

    #[error("sequence of {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HlsError {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        HlsError::Shape { op, msg: msg.into() }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        HlsError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

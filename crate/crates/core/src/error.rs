use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid einsum spec `{spec}`: {reason}")]
    Spec { spec: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid kernel spec: {0}")]
    Kernel(String),

    #[error("kernel tensor needs {estimate_bytes} bytes, over the {budget_bytes} byte budget")]
    BudgetExceeded { estimate_bytes: u128, budget_bytes: u128 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("sequence length {got} does not match the configured length {expected}")]
    SeqLenMismatch { expected: usize, got: usize },

    #[error("dataset file {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint/config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

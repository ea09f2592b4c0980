use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DalError>;

#[derive(Debug, Error)]
pub enum DalError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid label {0}, expected 0 or 1")]
    InvalidLabel(usize),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("freeze contract violated: {0}")]
    Contract(String),
    #[error("non-finite loss in {phase} phase, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

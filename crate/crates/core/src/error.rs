use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trainable parameter `{0}` has no gradient (graph detached?)")]
    MissingGrad(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; first non-finite grad: {param}")]
    NonFiniteLoss { epoch: usize, step: usize, param: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl Error {
    /// Internal invariant violations as opposed to faults in user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_) | Error::MissingGrad(_) | Error::NonFiniteLoss { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidShape { op, reason: reason.into() }
    }
}

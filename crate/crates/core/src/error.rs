use std::path::PathBuf;

use hkd_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A value outside the domain of a physical model or loss.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Static analysis met a layer it has no cost model for.
    #[error("cannot analyse layers: {}", .0.join(", "))]
    Analysis(Vec<String>),

    #[error("non-finite gradient for parameter {name} at step {step}")]
    NonFiniteGradient { name: String, step: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: expected HKD1")]
    BadMagic,

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("shape mismatch for {name}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

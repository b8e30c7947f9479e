use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Shapes disagree; the message names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid operator configuration (groups, strides, pooling factors).
    #[error("config error in {op}: {detail}")]
    Config { op: &'static str, detail: String },

    /// API misuse, e.g. backward from a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

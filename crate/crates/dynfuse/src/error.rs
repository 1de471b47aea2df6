//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor with {ndim} dimensions")]
    InvalidAxis { axis: usize, ndim: usize },

    #[error("{what} expects {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("backward() requires a scalar loss, got a tensor with {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("non-finite gradient in parameter '{param}'")]
    NanGradient { param: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

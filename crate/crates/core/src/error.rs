//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across tensor math, IO, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A caller-supplied argument is out of range or malformed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced (or was handed) NaN/Inf where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Explicit stability bound violated (e.g. FTCS time step too large).
    #[error("stability violation: {0}")]
    Stability(String),

    /// Two runs that must agree bitwise did not.
    #[error("non-deterministic result: {0}")]
    NonDeterministic(String),

    /// Training loss became NaN/Inf.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Byte-level parse/serialize failure (checkpoint, IDX, CSV).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by shape validators.
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

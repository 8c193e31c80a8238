//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulation framework.
#[derive(Debug, Error)]
pub enum SimError {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An optimization produced a non-finite value; the run is aborted
    /// rather than silently continuing with poisoned state.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Underlying I/O failure (file formats, persistence).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed serialized data.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

impl SimError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SimError::InvalidArgument(msg.into())
    }
}

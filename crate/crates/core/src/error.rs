//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an API contract (shape mismatch, bad ordering, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input values are outside the valid domain (non-finite, degenerate, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Camera intrinsics or pose are unusable.
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    /// Viewpoint selection could not satisfy the angle constraints.
    #[error("view constraints unsatisfiable: {0}")]
    ConstraintsUnsatisfiable(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

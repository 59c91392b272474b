use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SarError {
    /// A documented precondition of an operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The input is well-formed but carries no usable signal
    /// (empty mask, zero-mass image, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFinite { component: String, step: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SarError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Self::Degenerate(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SarError::Contract(_) | SarError::Config(_) | SarError::Format { .. } => 2,
            SarError::Degenerate(_) | SarError::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = SarError> = std::result::Result<T, E>;

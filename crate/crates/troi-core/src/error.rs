//! Error type shared across the operator library.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TroiError {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached an operation that requires finite inputs.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A tensor or boxes file does not follow the on-disk format.
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, TroiError>;

impl TroiError {
    pub fn shape(msg: impl Into<String>) -> Self {
        TroiError::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        TroiError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TroiError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn bad_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TroiError::BadFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum DescaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed image file (bad magic, truncated payload, nonsense header).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An evaluation had no pixels left after masking.
    #[error("no evaluable pixels (mask and ground-truth validity exclude everything)")]
    EmptyEvaluation,
}

pub type Result<T> = std::result::Result<T, DescaError>;

impl DescaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DescaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DescaError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

//! Crate-wide error type.
//!
//! Variants are grouped by how the command-line harness maps them to exit
//! codes: I/O problems, validation problems (bad shapes, bad arguments,
//! malformed files), and numeric failures (non-finite values, diverging
//! optimization, failed self-checks).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    IoPath {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shape/validation error for a tensor operation, naming the operation
    /// and the offending extents.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn numeric(detail: impl Into<String>) -> Self {
        Error::Numeric(detail.into())
    }

    pub fn io_path(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by malformed input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Invalid(_) | Error::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

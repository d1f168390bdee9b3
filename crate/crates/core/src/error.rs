use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum L2dError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} ({value})")]
    NonFinite { what: String, value: f64 },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = L2dError> = std::result::Result<T, E>;

impl L2dError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        L2dError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        L2dError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        L2dError::Format { path: path.into(), detail: detail.into() }
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Coarse failure classes, stable for machine consumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Data(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("block geometry: {0}")]
    Geometry(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("degenerate measurement: {0}")]
    Degenerate(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::Geometry(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => ErrorCategory::Data,
            Error::Training { .. } | Error::Degenerate(_) => ErrorCategory::Numeric,
            Error::Tensor(TensorError::Numeric { .. }) => ErrorCategory::Numeric,
            Error::Tensor(_) => ErrorCategory::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

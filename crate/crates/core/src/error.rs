use std::path::PathBuf;

use prnn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    Numeric(String),
    #[error("degenerate posterior: bridging matrix column {0} is all zero")]
    DegeneratePosterior(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 for configuration or input problems, 3 for
    /// shape incompatibilities, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Tensor(TensorError::Shape { .. }) => 3,
            Error::Tensor(TensorError::UnknownParameter(_) | TensorError::MissingGradient(_)) => 3,
            Error::Numeric(_) | Error::DegeneratePosterior(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) fn invalid<T>(what: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Validation {
        what,
        reason: reason.into(),
    })
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

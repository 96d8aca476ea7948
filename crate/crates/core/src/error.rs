use std::path::PathBuf;

use flowct_tensor::TensorError;
use thiserror::Error;

use crate::io::MhaError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what} = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Mha {
        path: PathBuf,
        #[source]
        source: MhaError,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value at integration step {step}")]
    NonFiniteStep { step: usize },
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Domain { .. } | Error::Checkpoint(_) => ErrorKind::Config,
            Error::Tensor(TensorError::NonFinite { .. })
            | Error::NonFiniteStep { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. } => ErrorKind::Numerical,
            Error::Tensor(TensorError::Config(_)) => ErrorKind::Config,
            Error::Tensor(_) | Error::Io { .. } | Error::Mha { .. } | Error::Data(_) => {
                ErrorKind::Data
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

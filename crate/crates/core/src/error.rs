use std::path::PathBuf;

use alora_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AloraError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl AloraError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AloraError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AloraError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        AloraError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps a failure with where in a run it happened.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            AloraError::Numeric(msg) => AloraError::Numeric(format!("{ctx}: {msg}")),
            AloraError::Tensor(TensorError::NonFinite { op }) => {
                AloraError::Numeric(format!("{ctx}: {op} produced a non-finite value"))
            }
            AloraError::Contract(msg) => AloraError::Contract(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T, E = AloraError> = std::result::Result<T, E>;

use std::path::PathBuf;

use aublend_autodiff::AutodiffError;
use thiserror::Error;

use crate::facs::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid activation: {0}")]
    Validation(ValidationReport),

    #[error("format error in {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown emotion `{name}`; valid emotions: {valid}")]
    UnknownEmotion { name: String, valid: String },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use nfs_gradcore::GradError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, NfsError>;

#[derive(Debug, Error)]
pub enum NfsError {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad input data, attributed to the file it came from.
    #[error("{}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NfsError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NfsError::Contract(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        NfsError::Ingestion { path: path.into(), msg: msg.into() }
    }

    /// True for errors caused by user-supplied inputs rather than internal failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            NfsError::Ingestion { .. } | NfsError::Config(_) | NfsError::Wav(_) | NfsError::Io(_)
        )
    }
}

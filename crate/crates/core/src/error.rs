use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation failed for {locator}: {msg}")]
    Validation { locator: String, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("feature blob {path}: {msg}")]
    Blob { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Input(_)
                | Error::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

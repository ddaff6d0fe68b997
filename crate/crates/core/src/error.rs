use thiserror::Error;

use crate::apps::llm::LlmError;
use crate::checkpoint::Container;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("failed to parse {context}: {message}")]
    Parse { context: String, message: String },

    #[error("non-finite values produced by {layer}")]
    NonFinite { layer: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("{stage} training diverged at epoch {epoch}; last finite checkpoint retained")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        last_finite: Box<Container>,
    },

    #[error(transparent)]
    Service(#[from] LlmError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::IncompatibleCheckpoint(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Image(_) | Error::Json(_) => 3,
            Error::Service(_) => 4,
            Error::NonFinite { .. } | Error::Diverged { .. } => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("question `{0}` has an empty concept list")]
    EmptyConceptList(String),

    #[error("unknown {kind} `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss for student `{0}`")]
    NonFiniteLoss(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {0}")]
    Diverged(usize),

    #[error("llm request for concept `{concept}` failed: {message}")]
    Llm { concept: String, message: String },

    #[error("{0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::agents::ParseError;
use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label: {0:?} is empty after normalization")]
    InvalidLabel(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sample {id:?}: {message}")]
    Schema { id: String, message: String },

    #[error("template error: {0}")]
    Template(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{context}: {source}")]
    Grammar {
        context: String,
        #[source]
        source: ParseError,
    },

    #[error("planner failed: {0}")]
    Planner(Box<Error>),

    #[error("socratic step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation failed: {0}")]
    Evaluation(Box<Error>),

    #[error("resume failed at iteration {iteration}: {message}")]
    Resume { iteration: usize, message: String },

    #[error("run {0} has already terminated; continuation refused")]
    Terminated(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a transport/backend failure.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::Backend(_) => true,
            Error::Planner(inner) | Error::Evaluation(inner) => inner.is_backend(),
            Error::Step { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeeError>;

#[derive(Debug, Error)]
pub enum GeeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GeeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GeeError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GeeError::ShapeMismatch(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        GeeError::Numerical(msg.into())
    }

    pub(crate) fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        GeeError::Parse {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, files, arguments).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GeeError::InvalidArgument(_)
                | GeeError::ShapeMismatch(_)
                | GeeError::Parse { .. }
                | GeeError::Config { .. }
                | GeeError::Range(_)
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("parse error in {section}: {message}")]
    Parse { section: String, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported version {found} (this build reads version {supported})")]
    Version { found: String, supported: u32 },

    #[error("configuration mismatch on `{key}`: file has {found}, requested {requested}")]
    ConfigMismatch {
        key: String,
        found: String,
        requested: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },

    #[error("integrity check failed for {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn parse(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            section: section.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (CLI exit code 2), as
    /// opposed to runtime aborts and I/O failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Shape { .. }
                | Error::Parse { .. }
                | Error::UnsupportedFormat(_)
                | Error::Version { .. }
                | Error::ConfigMismatch { .. }
                | Error::Capacity(_)
                | Error::Integrity { .. }
                | Error::Json(_)
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the library. Variants map onto the CLI exit codes
/// through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape error: {0}")]
    Shape(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Compatibility,
    Numeric,
    Input,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            Error::Compatibility(_) | Error::Vocabulary(_) => ErrorKind::Compatibility,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Shape(_) | Error::Ordering(_) | Error::Domain(_) | Error::Degenerate(_) => {
                ErrorKind::Input
            }
        }
    }
}

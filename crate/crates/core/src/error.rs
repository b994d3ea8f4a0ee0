use std::io;

use thiserror::Error;

/// Coarse classification of an [`Error`], used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Shape,
    Domain,
    State,
    Config,
    Format,
    Encode,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("encode error: {0}")]
    Encode(String),

    /// A parameter received a NaN or infinite gradient; the optimizer step was aborted.
    #[error("non-finite gradient for parameter `{param}` (group {group})")]
    NonFiniteGradient { param: String, group: String },

    /// The training loss became NaN or infinite.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) => ErrorKind::Shape,
            Error::Domain(_) | Error::NonFiniteGradient { .. } => ErrorKind::Domain,
            Error::State(_) | Error::NonFiniteLoss { .. } => ErrorKind::State,
            Error::Config(_) => ErrorKind::Config,
            Error::Format(_) => ErrorKind::Format,
            Error::Encode(_) => ErrorKind::Encode,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    /// True for aborts caused by numerical blow-up during training.
    pub fn is_numerical_abort(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. }
        )
    }
}

impl From<image::ImageError> for Error {
    fn from(err: image::ImageError) -> Self {
        match err {
            image::ImageError::IoError(e) => Error::Io(e),
            image::ImageError::Encoding(e) => Error::Encode(e.to_string()),
            other => Error::Format(other.to_string()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(e) => Error::Io(e),
                other => Error::Format(format!("{other:?}")),
            }
        } else {
            Error::Format(err.to_string())
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

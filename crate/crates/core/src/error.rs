use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A binary file did not match its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A checkpoint does not fit the model it is being loaded into.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: total={total}, l1={l1}, ssim={ssim}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        l1: f64,
        ssim: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor/layer shape mismatch.
    Dimension(String),
    /// API misuse (backward on a non-scalar, out-of-range label or index).
    Usage(String),
    /// Input data outside its documented domain.
    Validation(String),
    /// Bad run configuration (empty split partitions, zero counts).
    Config(String),
    /// Synthetic eye could not be rendered for the requested angles.
    Generation(String),
    /// Malformed container file; `offset` is the byte position of the problem.
    Format { offset: u64, message: String },
    /// NaN or infinity showed up where finite values are required.
    NonFinite(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

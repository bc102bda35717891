//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A text input file failed to parse; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A compressed block did not match the expected key context.
    #[error("codec context mismatch: {0}")]
    CodecContext(String),

    /// A compressed block is internally inconsistent.
    #[error("corrupted block: {0}")]
    CorruptedBlock(String),
}

impl Error {
    pub fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

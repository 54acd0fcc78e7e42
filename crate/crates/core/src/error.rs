use thiserror::Error;

/// Errors produced anywhere in the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} at position {position} is out of range for length {len}")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        len: usize,
    },

    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),

    #[error("cheirality violated for residual row {row} (depth {depth:e})")]
    Cheirality { row: usize, depth: f64 },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotSpd { pivot: usize },

    #[error("numerical breakdown at iteration {iteration}")]
    NumericalBreakdown { iteration: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

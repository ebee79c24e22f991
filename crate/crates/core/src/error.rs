use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("index set must be strictly increasing (found {prev} then {next})")]
    UnsortedIndices { prev: usize, next: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{0} used before its first (flush) frame")]
    NotFlushed(&'static str),

    #[error("first write to a buffer must cover all {expected} tokens, got {actual}")]
    PartialFlush { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

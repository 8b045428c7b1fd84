//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad configuration value (unknown activation, dropout p out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// API misuse: non-scalar loss, duplicate circuit wires, epoch out of range.
    #[error("usage error: {0}")]
    Usage(String),

    /// Batch too small for an operation that needs batch statistics.
    #[error("batch error: {0}")]
    Batch(String),

    /// Malformed input row; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input file does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Domain validation failure (non-unitary target, incomplete window, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Checkpoint or cache produced by an incompatible layout or version.
    #[error("version error: {0}")]
    Version(String),

    /// Value outside its documented domain.
    #[error("range error: {0}")]
    Range(String),

    /// A non-finite value where the pipeline requires finite numbers.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 2 for input/schema problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Validation(_)
            | Error::Version(_)
            | Error::Range(_) => 2,
            Error::Shape(_) | Error::Batch(_) | Error::NonFinite(_) | Error::Io(_) => 3,
        }
    }
}

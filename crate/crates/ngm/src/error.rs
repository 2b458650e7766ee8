//! Crate-wide error type.

/// Errors produced by the n-gram memory crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token id {id} out of range for vocab size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("corrupt embedding table: {0}")]
    CorruptTable(String),

    #[error("invalid slice: requested last {requested} of {len} positions")]
    InvalidSlice { requested: usize, len: usize },

    #[error("invalid vocab: {0}")]
    InvalidVocab(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("context overflow: {0}")]
    Context(String),

    #[error("kv cache inconsistent with prefix: {0}")]
    Cache(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the prompt-tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("degenerate embedding: row {row} has zero norm")]
    Degenerate { row: usize },

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("training diverged at step {step}: total loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("sample {index} is not unit norm (norm {norm})")]
    NonUnit { index: usize, norm: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint does not match the requested setup: {0}")]
    Mismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

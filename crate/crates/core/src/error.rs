use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported operation: {0}")]
    Capability(String),

    #[error("degenerate relevance map (mean {mean})")]
    DegenerateMap { mean: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown vocabulary entry {0:?}")]
    Vocabulary(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("data error in record {record}: {message}")]
    Data { record: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error("embedder error: {0}")]
    Embedder(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

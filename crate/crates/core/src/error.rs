use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the retrieval and sampling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("unknown customer `{0}`")]
    UnknownCustomer(String),

    #[error("inconsistent taxonomy: {0}")]
    Taxonomy(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("no usable negatives in batch")]
    NoNegatives,

    #[error("training diverged at epoch {epoch}: non-finite loss (last finite mean loss: {last_mean_loss:?})")]
    Diverged {
        epoch: usize,
        last_mean_loss: Option<f64>,
    },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row (or attention memory) with every entry masked out.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// Target symbol id outside the configured vocabulary.
    #[error("vocabulary: target id {id} out of range for vocab size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    /// An API contract violated by the caller (non-scalar loss, bad rate, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// Index outside a corpus split.
    #[error("range: {0}")]
    Range(String),

    /// Inconsistent or unusable configuration.
    #[error("config: {0}")]
    Config(String),

    /// Zero-length input sequence where at least one frame is required.
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    /// Training aborted on NaN/Inf loss; carries the diagnostics report.
    #[error("non-finite loss at epoch {epoch}, batch {batch}:\n{report}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        report: String,
    },

    /// Malformed or incompatible checkpoint / cache file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

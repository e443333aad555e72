use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("invalid label {label} at record {index}")]
    InvalidLabel { index: usize, label: u32 },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("no finite values to summarize")]
    EmptyData,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

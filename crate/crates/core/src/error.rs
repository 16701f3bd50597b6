use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload in record {record}")]
    Truncated { record: u64 },

    #[error("non-finite embedding value in record {record} at offset {offset}")]
    NonFinite { record: u64, offset: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size} (record {record})")]
    TokenOutOfRange { record: u64, id: u32, vocab_size: u32 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid probability table: {0}")]
    InvalidTable(String),

    #[error("table too large to enumerate: {cells} cells (limit {limit})")]
    TooLarge { cells: usize, limit: usize },
}

impl Error {
    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path { path: path.into(), source }
    }
}

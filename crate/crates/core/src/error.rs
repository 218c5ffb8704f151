use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: expected {expected} features, found {found}")]
    DimensionMismatchAt {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: empty label set")]
    EmptyLabelSet { line: usize },

    #[error("duplicate id {id}")]
    DuplicateId { id: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("code width mismatch: {left} bits vs {right} bits")]
    BitsMismatch { left: usize, right: usize },

    #[error("id {0} appears in both the query set and the database")]
    IdOverlap(u64),

    #[error("every query was excluded (no relevant database item)")]
    AllExcluded,

    #[error("every query was skipped during epoch {epoch}: no query has all three similarity strata")]
    DegenerateDataset { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

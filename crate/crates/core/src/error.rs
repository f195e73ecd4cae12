use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: mask has no active positions")]
    EmptyMask { op: &'static str },

    #[error("gradient requested for non-scalar loss of shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("zero-norm vector in strict mode ({0})")]
    ZeroVector(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("bad magic bytes {found:?} (expected \"OTFE\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported bundle version {0}")]
    BadVersion(u32),

    #[error("bundle truncated at record {record}")]
    Truncated { record: u64 },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("embedding width mismatch: {left} vs {right} ({context})")]
    DimMismatch {
        left: usize,
        right: usize,
        context: String,
    },

    #[error("id `{0}` not found")]
    MissingId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid chunk geometry: W={chunk_len}, B={overlap}")]
    Geometry { chunk_len: usize, overlap: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate lattice: no path carries probability mass")]
    DegenerateLattice,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("symbol id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("chunk {chunk} is not available yet ({available} encoded frames ready)")]
    Availability { chunk: usize, available: usize },

    #[error("stream protocol error: {0}")]
    Protocol(String),

    #[error("error rate undefined for an empty reference")]
    UndefinedMetric,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss on sample {sample}: {detail}")]
    NonFiniteLoss { sample: usize, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMask { .. } => "invalid-mask",
            Error::EmptyInput(_) => "empty-input",
            Error::Geometry { .. } => "geometry",
            Error::Numeric(_) => "numeric",
            Error::Capacity(_) => "capacity",
            Error::DegenerateLattice => "degenerate-lattice",
            Error::Contract(_) => "contract",
            Error::Vocab { .. } => "vocab",
            Error::Availability { .. } => "availability",
            Error::Protocol(_) => "protocol",
            Error::UndefinedMetric => "undefined-metric",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Checkpoint(e) => e.category(),
            Error::Data(_) => "data",
            Error::Io(_) => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint file is truncated")]
    Truncated,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint body is corrupt: {0}")]
    CorruptBody(String),
}

impl CheckpointError {
    pub fn category(&self) -> &'static str {
        match self {
            CheckpointError::CorruptHeader(_) => "checkpoint-corrupt-header",
            CheckpointError::Truncated => "checkpoint-truncated",
            CheckpointError::VersionMismatch { .. } => "checkpoint-version",
            CheckpointError::CorruptBody(_) => "checkpoint-corrupt-body",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("precision mismatch: expected {expected}, got {actual}")]
    Precision {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid label {label} (class count {classes})")]
    Label { label: u32, classes: usize },

    #[error("batch normalization needs at least 2 examples per batch in training mode, got {0}")]
    DegenerateVariance(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: u64 },

    #[error("not a checkpoint file")]
    NotCheckpoint,

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error("checkpoint corrupted: CRC32 mismatch (stored {stored:08x}, computed {computed:08x})")]
    Corrupt { stored: u32, computed: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("data format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("degenerate direction: start and end states coincide")]
    DegenerateDirection,

    #[error("curve mismatch: {0}")]
    CurveMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("experiment state error: {0}")]
    Experiment(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Shape(_) => "shape",
            Error::Length { .. } => "length",
            Error::Precision { .. } => "precision",
            Error::EmptyDataset => "empty_dataset",
            Error::Label { .. } => "label",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::NotCheckpoint => "not_checkpoint",
            Error::Version(_) => "version",
            Error::Corrupt { .. } => "corrupt",
            Error::Integrity(_) => "integrity",
            Error::Format { .. } => "format",
            Error::DegenerateDirection => "degenerate_direction",
            Error::CurveMismatch(_) => "curve_mismatch",
            Error::Config(_) => "config",
            Error::Experiment(_) => "experiment",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

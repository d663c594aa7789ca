use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is not above the normalization guard")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown image id {0}")]
    UnknownId(usize),

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("strategy {strategy} requires the {view} view, which was not supplied")]
    MissingView { strategy: &'static str, view: &'static str },

    #[error("inconsistent mining result: {0}")]
    InconsistentMining(String),

    #[error("candidate pool of anchor {anchor} exhausted while filling {needed} neighbors")]
    PoolExhausted { anchor: usize, needed: usize },

    #[error("mining failed for tuple with anchor {anchor}: {source}")]
    TupleFailed {
        anchor: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("labels are required for {0} but the dataset has none")]
    MissingLabels(&'static str),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

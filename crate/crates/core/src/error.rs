use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("coordinate {coord:?} outside grid extents {extents:?}")]
    OutOfRange {
        coord: [i64; 3],
        extents: [usize; 3],
    },

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid pooling scale {0}")]
    InvalidScale(usize),

    #[error("memory budget of {budget} bytes cannot hold one {needed}-byte feature vector")]
    Budget { budget: usize, needed: usize },

    #[error("invalid camera model: {0}")]
    Camera(String),

    #[error("emergency predicate already registered")]
    Conflict,

    #[error("invalid dispatch thresholds: {0}")]
    Thresholds(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("invalid subset size: {0}")]
    InvalidSize(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("parameter group `{0}` missing from registry")]
    Registry(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid pipeline spec: {0}")]
    Pipeline(String),

    #[error("invalid thread stage plan: {0}")]
    Plan(String),

    #[error("scene routed to the accuracy-prioritized expert but no image features were supplied")]
    MissingModality,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

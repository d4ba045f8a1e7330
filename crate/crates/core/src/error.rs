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
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("malformed row {row}, column {column}: {message}")]
    MalformedRow {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("unknown label '{label}' at row {row}")]
    UnknownLabel { label: String, row: usize },
    #[error("unknown category '{value}' for feature '{feature}' at row {row}")]
    UnknownCategory {
        value: String,
        feature: String,
        row: usize,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("objective returned non-finite value {value} at position {position:?}")]
    NonFiniteFitness { value: f64, position: Vec<f64> },
    #[error("numeric overflow at layer {layer}, timestep {timestep}")]
    NumericOverflow { layer: usize, timestep: usize },
    #[error("device not enrolled: {0}")]
    DeviceNotEnrolled(String),
    #[error("chain invalid, refusing append: {0}")]
    ChainInvalid(String),
    #[error("feature out of [0,1]: index {index} has value {value}")]
    FeatureOutOfRange { index: usize, value: f64 },
    #[error("pattern error: {0}")]
    Pattern(String),
    #[error("test undefined: {0}")]
    TestUndefined(String),
    #[error("decode error: {0}")]
    Decode(String),
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
}

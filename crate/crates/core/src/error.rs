use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transform is not invertible (|det| = {det:e})")]
    NonInvertible { det: f64 },

    #[error("degenerate transform (|det| = {det:e})")]
    DegenerateTransform { det: f64 },

    #[error("malformed transform matrix: {0}")]
    MalformedTransform(String),

    #[error("image value {value} outside the unit interval")]
    OutOfRangeInput { value: f32 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("class id {id} is out of range for {classes} classes")]
    BadClassId { id: u32, classes: usize },

    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("box score {0} outside [0, 1]")]
    BadScore(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("sample {sample} is counted as labeled for {task} but has no label")]
    MissingLabel { sample: usize, task: &'static str },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("empty partition: {0}")]
    EmptyPartition(&'static str),

    #[error("confusion matrix has no evaluated pixels")]
    EmptyMatrix,

    #[error("backward already ran on this graph; run a fresh forward first")]
    GraphReuse,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

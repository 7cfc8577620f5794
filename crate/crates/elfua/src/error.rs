//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("manifest {path}, line {line}: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("failed to read image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("person {person_id} has {available} samples, need {needed} (support {support} + query {query})")]
    InsufficientSamples {
        person_id: String,
        available: usize,
        needed: usize,
        support: usize,
        query: usize,
    },

    #[error("unknown person id: {0}")]
    UnknownPerson(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{m} permutation classes requested but the {grid}x{grid} grid only admits {space}")]
    PermutationSpaceExceeded { m: usize, grid: usize, space: u128 },

    #[error("permutation index {index} out of range for vocabulary of {m}")]
    PermIndexOutOfRange { index: usize, m: usize },

    #[error("image dimensions {h}x{w} not divisible by grid {grid}")]
    GridMismatch { h: usize, w: usize, grid: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown parameter name: {0}")]
    UnknownParameter(String),

    #[error("missing override for adaptable parameter: {0}")]
    MissingParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("class index {index} out of range [0, {m})")]
    ClassIndexOutOfRange { index: usize, m: usize },

    #[error("batch length mismatch: {0}")]
    LengthMismatch(String),

    #[error("feature taps differ between source and target: {0}")]
    TapMismatch(String),

    #[error("jmmd needs at least 2 samples per side, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite loss encountered ({context})")]
    NonFiniteLoss { context: String },

    #[error("oracle mode requires gaze labels: {0}")]
    MissingLabels(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

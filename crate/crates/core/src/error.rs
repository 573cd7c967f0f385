use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("judgment file: comparison {index} references unknown point {point}")]
    DanglingPoint { index: usize, point: i64 },

    #[error("judgment file: comparison {index} has invalid weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },

    #[error("no scene has at least two lightings")]
    NoTrainablePairs,

    #[error("degenerate interpolation: blended extrinsic code has zero length")]
    DegenerateInterpolation,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint version {found} is incompatible (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("training aborted at step {step}: non-finite loss ({breakdown})")]
    NonFiniteLoss { step: u64, breakdown: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

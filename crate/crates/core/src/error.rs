use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected}-channel image, got {actual} channels")]
    WrongChannelCount { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gaussian sigma must be finite and > 0, got {0}")]
    NonPositiveSigma(f64),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid loss weights: {0}")]
    InvalidLossWeights(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no ground-truth boxes to evaluate against")]
    NoGroundTruth,

    #[error("cannot aggregate an empty list")]
    EmptyList,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),

    #[error("sample {id}: missing paired file {path}")]
    MissingPair { id: u64, path: PathBuf },

    #[error("{path}:{line}: malformed annotation: {reason}")]
    MalformedAnnotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown classical method `{0}`")]
    UnknownMethod(String),

    #[error("frozen parameters changed: digest {before} -> {after}")]
    FrozenParamViolation { before: String, after: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

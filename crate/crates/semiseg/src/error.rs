//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a NIfTI-1 file ({0})")]
    NiftiFormat(String),

    #[error("shape mismatch: {context} expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("non-positive voxel spacing {0:?}")]
    NonPositiveSpacing([f64; 3]),

    #[error("non-finite intensities in volume after ingestion")]
    NonFiniteIntensity,

    #[error("invalid dataset split: {0}")]
    InvalidSplit(String),

    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),

    #[error("backbone configuration invalid: {0}")]
    InvalidBackbone(String),

    #[error("patch shape {got:?} incompatible with backbone (spatial dims must be divisible by {divisor})")]
    PatchNotDivisible { got: [usize; 3], divisor: usize },

    #[error("parameter vector length {got} does not match expected layout length {expected}")]
    ParamLayoutMismatch { expected: usize, got: usize },

    #[error("uncertainty estimation needs at least 2 stochastic passes, got {0}")]
    TooFewPasses(usize),

    #[error("oracle query requires a non-empty prompt set")]
    EmptyPrompts,

    #[error("surface distance undefined for an empty mask ({0})")]
    EmptySurface(String),

    #[error("non-finite loss in term `{term}` at iteration {t}")]
    NonFiniteLoss { term: &'static str, t: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;

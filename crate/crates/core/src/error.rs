use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid stride {0}, must be >= 1")]
    InvalidStride(usize),
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("calibration matrix is singular")]
    SingularCalibration,
    #[error("world point ({0}, {1}) lies outside the map")]
    OutOfMap(f64, f64),

    #[error("no calibration for view {0}")]
    MissingCalibration(String),
    #[error("cross-attention needs at least one key")]
    EmptyKeySequence,
    #[error("expected {expected} feature scales, got {got}")]
    ScaleMismatch { expected: usize, got: usize },
    #[error("saliency probe is empty")]
    EmptyProbe,

    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("corrupt tensor container: {0}")]
    CorruptContainer(String),
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training loss became non-finite at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("all positions are masked (empty clip)")]
    AllMasked,

    #[error("loss must be a scalar, got {elements} elements")]
    NonScalarLoss { elements: usize },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid label {0}: expected 0 or 1")]
    InvalidLabel(f64),

    #[error("labels contain a single class; need both positives and negatives")]
    SingleClass,

    #[error("targets have zero variance")]
    ZeroVariance,

    #[error("attention weights are not normalized (row sum {0})")]
    UnnormalizedWeights(f64),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u16,
        expected: u16,
    },

    #[error("truncated file {path}: expected {expected} bytes of payload, got {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

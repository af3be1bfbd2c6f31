use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TadaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TadaError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate style for {domain} domain: rendered images have zero variance")]
    DegenerateStyle { domain: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty mask: {0} is undefined without valid pixels")]
    EmptyMask(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("regime {regime} needs {label}, which is hidden or missing from the batch")]
    HiddenLabel { regime: String, label: &'static str },

    #[error("dataset format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("freeze refused: {0}")]
    FreezeRefused(&'static str),

    #[error("probe locations out of bounds at indices {indices:?}")]
    OutOfBounds { indices: Vec<usize> },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("run metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TadaError {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TadaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

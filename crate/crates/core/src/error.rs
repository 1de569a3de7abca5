use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset directory not found: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("cannot decode image {}: {reason}", .path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("label file for video `{video}` has {labels} entries but the video has {frames} frames")]
    LabelMismatch {
        video: String,
        labels: usize,
        frames: usize,
    },

    #[error("malformed label file {}: line {line}: {reason}", .path.display())]
    LabelParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("both classes must be present (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("non-finite loss at step {step}: intensity={intensity} compactness={compactness} separateness={separateness} total={total}")]
    NonFiniteLoss {
        step: u64,
        intensity: f64,
        compactness: f64,
        separateness: f64,
        total: f64,
    },

    #[error("checkpoint format version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {reason}")]
    ConfigParse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

use std::path::PathBuf;

/// Errors raised across the placement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidPointCloud(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("segment mismatch: expected {expected} points, got {actual}")]
    SegmentMismatch { expected: usize, actual: usize },

    #[error("segment {0} is empty")]
    EmptySegment(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("placement failed after {0} attempts")]
    PlacementFailure(usize),

    #[error("occlusion failed after {0} attempts")]
    OcclusionFailure(usize),

    #[error("insufficient points: requested {requested}, available {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("version mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonfiniteLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

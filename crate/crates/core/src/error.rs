use crate::geometry::RectPx;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid frame dimensions {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("degenerate ground truth box {0:?}")]
    DegenerateGroundTruth(RectPx),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("confidence-ordered selection needs scored boxes; box {0} has no confidence")]
    UnscoredBox(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("annotation {annotation} references unknown image id {image_id}")]
    DanglingImageId { annotation: usize, image_id: u64 },
    #[error("duplicate image id {0}")]
    DuplicateImageId(u64),
    #[error("record {record} has negative box dimensions {w}x{h}")]
    NegativeBox { record: usize, w: f64, h: f64 },
    #[error("no proposals for image ids {0:?}")]
    MissingProposals(Vec<u64>),
    #[error("heatmap has {got} values, expected {expected}")]
    HeatmapSize { got: usize, expected: usize },
    #[error("frame count must be positive")]
    NoFrames,
    #[error("at least one stage is required")]
    NoStages,
    #[error("stage {name:?} has non-positive rate {fps}")]
    InvalidRate { name: String, fps: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBoundsEvent {
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("event timestamp {0} is not finite")]
    NonFiniteTimestamp(f64),

    #[error("event with timestamp {t} falls outside window [{start}, {end})")]
    OutOfWindowEvent { t: f64, start: f64, end: f64 },

    #[error("invalid polarity {0}: expected +1 or -1")]
    InvalidPolarity(i64),

    #[error("degenerate time window [{start}, {end})")]
    DegenerateWindow { start: f64, end: f64 },

    #[error("invalid slice boundaries: {0}")]
    InvalidBoundaries(String),

    #[error("frame timestamps must be finite and strictly increasing")]
    DegenerateTimestamps,

    #[error("EmptyScene: scene configuration has no objects or no scenes")]
    EmptyScene,

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no ground-truth flow available for {0}")]
    MissingGroundTruth(String),

    #[error("transitional synthesis needs at least one event slice")]
    EmptySliceList,

    #[error("MissingCheckpoint: {0}")]
    MissingCheckpoint(String),

    #[error("MissingDataset: {0}")]
    MissingDataset(String),

    #[error("NonFiniteLoss at step {step} in stage {stage}; diagnostics written to {dump:?}")]
    NonFiniteLoss {
        stage: String,
        step: u64,
        dump: Option<PathBuf>,
    },

    #[error("TooFewFrames: {frames} frames cannot hold a window with skip {skip}")]
    TooFewFrames { frames: usize, skip: usize },

    #[error("TooFewTargets: skip factor {0} leaves no inner frame to interpolate")]
    TooFewTargets(usize),

    #[error("MissingFile: {0}")]
    MissingFile(PathBuf),

    #[error("CorruptEventFile: {0}")]
    CorruptEventFile(String),

    #[error("corrupt flow file: {0}")]
    CorruptFlowFile(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_check(context: &'static str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        })
    }
}

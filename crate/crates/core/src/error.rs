use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the softlabel pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid area: {0}")]
    InvalidArea(String),

    #[error("invalid tile spec: {0}")]
    InvalidTileSpec(String),

    #[error("pixel ({x}, {y}) outside {width}x{height} tile")]
    PixelOutOfBounds { x: f64, y: f64, width: u32, height: u32 },

    #[error("point ({lat}, {lon}) is more than one footprint away from the tile")]
    PointOutsideTile { lat: f64, lon: f64 },

    #[error("empty tour")]
    EmptyTour,

    #[error("label line {line}: {message}")]
    LabelParse { line: usize, message: String },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("detection {index} has no confidence")]
    MissingConfidence { index: usize },

    #[error("crop is empty after clamping to the image")]
    EmptyCrop,

    #[error("crop too small: {width}x{height} (need at least {min}x{min})")]
    DegenerateCrop { width: u32, height: u32, min: u32 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("scene placement failed: {0}")]
    Placement(String),

    #[error("detector {stage} failed: {message}")]
    Detector { stage: String, message: String },

    #[error("state directory {0} is locked by another orchestrator")]
    Locked(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            context: context.to_string(),
            source,
        }
    }

    /// True for failures of the external detector process.
    pub fn is_detector_failure(&self) -> bool {
        matches!(self, Error::Detector { .. })
    }
}

/// Extension for attaching a path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path.display(), e))
    }
}

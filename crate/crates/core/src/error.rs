use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

/// Errors produced by the bias-estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point ({lat}, {lon}) lies outside the grid domain")]
    OutOfDomain { lat: f64, lon: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("channel mismatch: expected {expected:?}, found {found:?}")]
    ChannelMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("expected {expected} channels, found {found}")]
    ChannelCountMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no raster pixel centre falls inside the cell")]
    EmptyCell,

    #[error("class code {0} is not in the configured class set")]
    UnknownClass(u8),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("date mismatch: {0}")]
    DateMismatch(String),

    #[error("evaluation window selects no days")]
    EmptyEval,

    #[error("dataset has no days")]
    EmptyDataset,

    #[error("spatial dimensions {h}x{w} are not both even")]
    OddSpatialDims { h: usize, w: usize },

    #[error("target mask has no valid cells")]
    AllMasked,

    #[error("feature vector has length {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no valid (cell, day) pairs to evaluate")]
    NoValidPairs,

    #[error("evaluation sets differ: {0}")]
    MismatchedEvalSets(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the indexing and search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },

    #[error("insufficient pyramid: slide {slide_id} has {levels} level(s), at least 2 required")]
    InsufficientPyramid { slide_id: String, levels: usize },

    #[error("level {magnification}x of slide {slide_id}: {reason}")]
    LevelGeometry {
        slide_id: String,
        magnification: f64,
        reason: String,
    },

    #[error("region ({x}, {y}) size {size} out of bounds for level {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        size: u32,
        width: u32,
        height: u32,
    },

    #[error("invalid corpus spec: {0}")]
    InvalidCorpusSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty slide {0}: no tissue patches")]
    EmptySlide(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("raster is {width}x{height}, expected {expected}x{expected}")]
    RasterSize {
        width: u32,
        height: u32,
        expected: u32,
    },

    #[error("non-finite feature value at position {0}")]
    NonFinite(usize),

    #[error("feature vector too short for a barcode: d = {0}, need at least 2")]
    FeatureTooShort(usize),

    #[error("barcode length mismatch: {0} vs {1}")]
    BarcodeLength(usize, usize),

    #[error("empty barcode bunch")]
    EmptyBunch,

    #[error("external features, line {line}: {reason}")]
    FeatureFile { line: usize, reason: String },

    #[error("no external feature for slide {slide_id} patch ({grid_x}, {grid_y})")]
    UnknownPatch {
        slide_id: String,
        grid_x: u32,
        grid_y: u32,
    },

    #[error("extractor mismatch: index uses {expected}, got {found}")]
    ExtractorMismatch { expected: String, found: String },

    #[error("unsupported index format: {0}")]
    Version(String),

    #[error("index checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("index file truncated")]
    Truncated,

    #[error("corrupt index: {0}")]
    Corrupt(String),

    #[error("duplicate slide id {0}")]
    DuplicateSlide(String),

    #[error("unknown slide {0}")]
    UnknownSlide(String),

    #[error("no candidate slides for query {0}")]
    EmptyCandidates(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

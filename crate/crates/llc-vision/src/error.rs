//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: usage errors exit with 1,
//! data errors (bad images, malformed corpora, corrupt bundles) with 2, and
//! internal invariant violations with 3.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("unsupported image format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt image data in {path}: {detail}")]
    CorruptImage { path: PathBuf, detail: String },

    #[error("image {width}x{height} is smaller than the {tiles_x}x{tiles_y} CLAHE tile grid")]
    ImageSmallerThanTileGrid { width: u32, height: u32, tiles_x: u32, tiles_y: u32 },

    #[error("image {width}x{height} too small for any descriptor scale (smallest patch is {min_patch}px)")]
    NoValidScale { width: u32, height: u32, min_patch: u32 },

    #[error("descriptor pool contains no non-zero descriptors")]
    EmptyDescriptorPool,

    #[error("malformed descriptor stream: {0}")]
    BadDescriptorStream(String),

    #[error("malformed codebook data: {0}")]
    BadCodebook(String),

    #[error("malformed pooled-feature data: {0}")]
    BadFeatureData(String),

    #[error("k-means needs at least {m} samples for {m} centers, got {got}")]
    PoolTooSmall { m: usize, got: usize },

    #[error("requested K={k} nearest bases but the codebook holds only {m}")]
    KExceedsCodebook { k: usize, m: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("code location ({x}, {y}) lies outside the {width}x{height} image")]
    LocationOutOfBounds { x: u32, y: u32, width: u32, height: u32 },

    #[error("class {class} has no training samples")]
    EmptyClass { class: usize },

    #[error("class directory contains no images: {0}")]
    EmptyClassDir(PathBuf),

    #[error("class names collide after normalization: {0:?}")]
    DuplicateClass(String),

    #[error("dataset root has no class directories: {0}")]
    EmptyDataset(PathBuf),

    #[error("validation set has no unknown-labeled samples, cannot tune thresholds")]
    NoUnknownValidation,

    #[error("test split is empty")]
    EmptyTestSplit,

    #[error("test label {label:?} is not covered by the model bundle")]
    UnknownTestLabel { label: String },

    #[error("model bundle {path}: {detail}")]
    BadBundle { path: PathBuf, detail: String },

    #[error("config file {path}: {detail}")]
    BadConfig { path: PathBuf, detail: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    /// Exit code the CLI maps this error to: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFiniteLoss { .. } | Error::Internal(_) => 3,
            _ => 2,
        }
    }

    /// Wrap an I/O error with the path it occurred on, turning `NotFound`
    /// into the dedicated variant so callers can report it uniformly.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}

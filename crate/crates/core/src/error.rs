use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("no image pairs found under {0}")]
    EmptyDataset(PathBuf),

    #[error("pair {pair_id} has no sharp image in a split that requires ground truth")]
    MissingSharp { pair_id: String },

    #[error("duplicate pair id {0}")]
    DuplicatePair(String),

    #[error("invalid manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("crop size {size} exceeds image extent {height}x{width}")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(
        "batch-norm statistics of {0} are not frozen; switch the model to eval mode before fusing"
    )]
    UnfrozenStatistics(String),

    #[error("fused layer {layer} deviates from its multi-branch form by {max_abs_err:e}")]
    FusionMismatch { layer: String, max_abs_err: f64 },

    #[error("gate is defined at 1920x1200, report was computed at {width}x{height}")]
    GateResolution { height: usize, width: usize },

    #[error("unsupported layer type {0} in MACs accounting")]
    UnsupportedLayer(String),

    #[error("no perceptual backend configured; provide one or score with lambda3 = 0")]
    NoBackend,

    #[error("step {step} out of range for a stage of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("loss became non-finite at step {step}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("invalid tile geometry: tile {tile}, overlap {overlap}")]
    TileGeometry { tile: usize, overlap: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

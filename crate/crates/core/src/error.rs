use std::path::PathBuf;

/// Every failure the library can report. Variant names follow the error codes
/// used throughout the docs (`SHAPE_MISMATCH`, `GAP_TOO_LONG`, ...).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unreadable media at {path}: {reason}")]
    UnreadableMedia { path: PathBuf, reason: String },

    #[error("video at {0} has no frames")]
    EmptyVideo(PathBuf),

    #[error("invalid sample rate {0}")]
    InvalidRate(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid value: {0}")]
    InvalidArgument(String),

    #[error("missing run of {run} frames starting at frame {start} exceeds the allowance of {max_gap}")]
    GapTooLong { start: usize, run: usize, max_gap: usize },

    #[error("no face detected in any frame")]
    NoFace,

    #[error("noise level must be positive, got {0}")]
    InvalidSigma(f64),

    #[error("audio sample rate {actual} does not match the extractor rate {expected}")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("clip has {frames} frames, need at least {required}")]
    ClipTooShort { frames: usize, required: usize },

    #[error("sequence of {frames} frames is shorter than one segment of {segment_len}")]
    TooShort { frames: usize, segment_len: usize },

    #[error("mask covers {coverage:.3} of the frame; degenerate masks are not trainable")]
    DegenerateMask { coverage: f64 },

    #[error("non-finite loss for samples {sample_ids:?}")]
    NonFiniteLoss { sample_ids: Vec<String> },

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NonPsdCovariance { min_eigenvalue: f64 },

    #[error("no counterpart for {0}")]
    MissingPair(String),

    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy { kind: &'static str, name: String, available: String },

    #[error("adapter `{adapter}` failed: {reason}")]
    Adapter { adapter: String, reason: String },

    #[error("i/o failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

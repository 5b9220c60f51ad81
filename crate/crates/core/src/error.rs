use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decode video source {path}: {reason}")]
    UndecodableSource { path: String, reason: String },

    #[error("video source {0} contains no frames")]
    ZeroFrameSource(String),

    #[error("missing clip file {}", .0.display())]
    MissingClipFile(PathBuf),

    #[error("duplicate clip id {0}")]
    DuplicateClipId(String),

    #[error("annotation file {} lists no clips", .0.display())]
    EmptyAnnotation(PathBuf),

    #[error("class split needs at least 2 classes, found {0}")]
    TooFewClasses(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("need {needed} eligible classes, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("class {class} holds {found} clips, episode needs {needed}")]
    InsufficientClipsInClass {
        class: String,
        needed: usize,
        found: usize,
    },

    #[error("episode is empty")]
    EmptyEpisode,

    #[error("dimension {dim}={size} is not divisible by {by}")]
    IndivisibleDimensions {
        dim: &'static str,
        size: usize,
        by: usize,
    },

    #[error("masking ratio {0} outside [0, 1)")]
    InvalidRatio(f64),

    #[error("target value {0} outside [0, 1]")]
    TargetOutOfRange(f64),

    #[error("memory key contains non-finite values")]
    NonFiniteKey,

    #[error("controller state became non-finite")]
    NonFiniteState,

    #[error("window of {window} frames at stride {rate} exceeds {frames} frames")]
    WindowTooLarge {
        window: usize,
        rate: usize,
        frames: usize,
    },

    #[error("mixup needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("config mismatch at `{key}`: {reason}")]
    ConfigMismatch { key: String, reason: String },

    #[error("stage {0} requires an input checkpoint")]
    MissingCheckpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigMismatch {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

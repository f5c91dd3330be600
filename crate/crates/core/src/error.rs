use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    DimensionTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("image must be square, got {height}x{width}")]
    NonSquareImage { height: usize, width: usize },
    #[error("image side {side} is not divisible by grid size {grid}")]
    NonDivisibleGrid { side: usize, grid: usize },
    #[error("patch {side}px at ({top_x}, {top_y}) does not fit inside {height}x{width} image")]
    PatchOutOfBounds {
        top_x: usize,
        top_y: usize,
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("{what} must not be empty")]
    Empty { what: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid probability row: {0}")]
    InvalidProbabilities(String),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("affinity undefined: clean accuracy is zero")]
    UndefinedAffinity,
    #[error("non-finite gradient during attack")]
    NonFiniteGradient,
    #[error("corrupt source {path}: {reason}")]
    CorruptSource { path: PathBuf, reason: String },
    #[error("missing source {0}")]
    MissingSource(PathBuf),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("unknown recipe `{name}`; available: {available}")]
    UnknownRecipe { name: String, available: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error")]
    Codec(#[from] image::ImageError),
    #[error("json error")]
    Json(#[from] serde_json::Error),
    #[error("invalid config")]
    ConfigParse(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

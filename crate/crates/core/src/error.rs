use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("motion order must be in 1..=4, got {0}")]
    InvalidOrder(u8),

    #[error("invalid segment: {0}")]
    InvalidSegment(String),

    #[error("invalid sparse track: {0}")]
    InvalidTrack(String),

    #[error("need at least {need} history positions, got {have}")]
    InsufficientHistory { have: usize, need: usize },

    #[error("{path}: line {line}: {detail}")]
    Parse { path: String, line: u64, detail: String },

    #[error("{path}: frame {frame}: {detail}")]
    Frame { path: String, frame: i64, detail: String },

    #[error("invalid window parameters: {0}")]
    Window(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("scene does not match model: {0}")]
    Scene(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid training config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

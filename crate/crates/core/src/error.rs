use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("action angle {angle}° exceeds bound ±{bound}°")]
    ActionOutOfBound { angle: f64, bound: f64 },

    #[error("invalid mask parameters: {0}")]
    InvalidMask(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("decode error in {path:?}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient leaked past a stop-gradient: {0}")]
    StopGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("reconstruction error: {0}")]
    Reconstruction(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

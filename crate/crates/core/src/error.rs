use std::path::PathBuf;

use stt_tensor::checkpoint::CheckpointError;
use stt_tensor::TensorError;
use thiserror::Error;

use crate::data::volume::VolumeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("invalid config: {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{what} has values outside [0, 1]")]
    MaskRange { what: &'static str },
    #[error("could not place {wanted} instances in {dims:?} after {attempts} attempts")]
    InfeasiblePacking {
        wanted: usize,
        dims: [usize; 3],
        attempts: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Shape { op, msg: msg.into() }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config { .. } | Self::Json { .. })
    }
}

use std::path::PathBuf;

use thiserror::Error;
use wsrpn_autodiff::AutodiffError;

use crate::losses::LossBreakdown;

pub type Result<T, E = WsrpnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WsrpnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image side {side} is not divisible by the backbone stride {stride}")]
    ImageSide { side: usize, stride: usize },
    #[error("degenerate receptive field for sample {sample} token {token}: mass {mass:e}")]
    DegenerateField {
        sample: usize,
        token: usize,
        mass: f64,
    },
    #[error("supervised contrastive loss needs at least 2 samples per batch, got {0}; disable supcon or use paired augmentation")]
    BatchTooSmall(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("unknown class {name:?}; valid classes: {valid:?}")]
    UnknownClass { name: String, valid: Vec<String> },
    #[error("dataset: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("checkpoint format version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss {
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WsrpnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

//! Weakly supervised ROI proposal network: a patch branch and an ROI branch
//! trained from image-level labels, with Gaussian soft ROI pooling.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patch;
pub mod roi;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{LossConfig, LossSwitches, ModelConfig, TrainConfig};
pub use error::{Result, WsrpnError};
pub use model::{Forward, Prediction, Wsrpn};
pub use trainer::{train, TrainOptions, TrainOutcome};
pub use wsrpn_autodiff as autodiff;

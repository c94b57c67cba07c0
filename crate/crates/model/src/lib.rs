//! Silique segmentation network: dynamic voxel feature encoder, dual-window
//! sparse transformer, semantic head with region-slide inference, and an
//! offset/cluster/score instance head.

pub mod config;
pub mod dvfe;
mod error;
pub mod instance;
pub mod network;
pub mod semantic;
pub mod train;
pub mod window;

pub use config::{InstanceConfig, ModelConfig, PatchSpec, ShiftConvention, TrainConfig, Variant};
pub use error::{ModelError, Result};

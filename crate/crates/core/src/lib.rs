//! Geometry substrate for dense plant point-cloud segmentation.
//!
//! This crate holds everything that does not need gradients: labeled clouds,
//! voxel grids with their point/voxel maps, feature augmentation, the
//! reference scatter/propagate primitives, the synthetic plant generator with
//! its text format, and the evaluation metrics.

pub mod cloud;
pub mod dataset;
pub mod error;
pub mod features;
pub mod metrics;
pub mod voxel;

pub use cloud::{LabeledCloud, NON_SILIQUE, NO_INSTANCE, SILIQUE};
pub use error::{CoreError, Result};
pub use features::{
    augment_features, propagate, scatter_aggregate, AggregateMode, Aggregated, AugmentFlags,
    FeatureMap, Resolution, VoxelReference,
};
pub use voxel::{
    cluster_centroids, dynamic_voxelize, hard_voxelize, voxel_centers, VoxelGrid, VoxelMap,
};

//! Synthetic labeled plants, the cloud text format, normalization and
//! dataset splits.

mod io;
mod normalize;
mod split;
mod synth;

pub use io::{format_cloud, parse_cloud, read_cloud, write_cloud, CLOUD_MAGIC};
pub use normalize::{normalize_unit_cube, NormalizeTransform};
pub use split::{make_splits, read_manifest, write_manifest, DatasetSplit, SplitMode};
pub use synth::{generate_plant, PlantSpec, SiliqueGeometry};

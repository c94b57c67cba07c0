//! Point feature augmentation and the reference scatter/propagate primitives.

use std::str::FromStr;

use crate::cloud::LabeledCloud;
use crate::error::{CoreError, Result};
use crate::voxel::{cluster_centroids, voxel_centers, VoxelGrid, VoxelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    PointWise,
    VoxelWise,
}

/// Dense row-major `rows x channels` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Vec<f64>,
    pub channels: usize,
    pub resolution: Resolution,
}

impl FeatureMap {
    pub fn new(values: Vec<f64>, channels: usize, resolution: Resolution) -> Result<Self> {
        if channels == 0 || values.len() % channels != 0 {
            return Err(CoreError::Shape(format!(
                "{} values do not form rows of {channels} channels",
                values.len()
            )));
        }
        Ok(Self {
            values,
            channels,
            resolution,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Where the voxel offset feature measures from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VoxelReference {
    /// Metric center of the voxel.
    #[default]
    Center,
    /// Raw integer voxel coordinate, kept for fidelity experiments.
    Index,
}

/// Optional channels appended to the raw coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub use_cluster_centroid: bool,
    pub use_voxel_center: bool,
    pub use_l2_norm: bool,
    pub voxel_reference: VoxelReference,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            use_cluster_centroid: true,
            use_voxel_center: true,
            use_l2_norm: false,
            voxel_reference: VoxelReference::Center,
        }
    }
}

impl AugmentFlags {
    pub fn coords_only() -> Self {
        Self {
            use_cluster_centroid: false,
            use_voxel_center: false,
            use_l2_norm: false,
            voxel_reference: VoxelReference::Center,
        }
    }

    pub fn channels(&self) -> usize {
        3 + 3 * self.use_cluster_centroid as usize
            + 3 * self.use_voxel_center as usize
            + self.use_l2_norm as usize
    }
}

/// Per-point features: `(x, y, z)`, then `p - centroid`, then `p - voxel
/// center`, then `|p|`, each block present only when its flag is set.
pub fn augment_features(
    cloud: &LabeledCloud,
    vmap: &VoxelMap,
    grid: &VoxelGrid,
    flags: &AugmentFlags,
) -> FeatureMap {
    let channels = flags.channels();
    let centroids = flags
        .use_cluster_centroid
        .then(|| cluster_centroids(cloud, vmap));
    let centers = flags.use_voxel_center.then(|| match flags.voxel_reference {
        VoxelReference::Center => voxel_centers(vmap, grid),
        VoxelReference::Index => vmap
            .voxel_coords
            .iter()
            .map(|v| v.map(|c| c as f64))
            .collect(),
    });
    let mut values = Vec::with_capacity(cloud.len() * channels);
    for (i, p) in cloud.coords.iter().enumerate() {
        values.extend_from_slice(p);
        if let Some(pc) = &centroids {
            values.extend((0..3).map(|a| p[a] - pc[i][a]));
        }
        if let Some(vc) = &centers {
            match vmap.point_to_voxel[i] {
                Some(j) => values.extend((0..3).map(|a| p[a] - vc[j][a])),
                None => values.extend([0.0; 3]),
            }
        }
        if flags.use_l2_norm {
            values.push((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
    }
    FeatureMap {
        values,
        channels,
        resolution: Resolution::PointWise,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateMode {
    Max,
    Mean,
    Sum,
}

impl FromStr for AggregateMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" | "average" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(CoreError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub map: FeatureMap,
    /// For max mode, the winning point of every `(voxel, channel)` entry.
    pub argmax: Option<Vec<usize>>,
}

/// Reduces point rows into their voxels channel by channel. Max ties go to
/// the lowest point index.
pub fn scatter_aggregate(
    feat: &FeatureMap,
    vmap: &VoxelMap,
    mode: AggregateMode,
) -> Result<Aggregated> {
    if feat.resolution != Resolution::PointWise || feat.rows() != vmap.num_points() {
        return Err(CoreError::Shape(format!(
            "scatter expects {} point rows, got {} {:?} rows",
            vmap.num_points(),
            feat.rows(),
            feat.resolution
        )));
    }
    let c = feat.channels;
    let mut values = vec![0.0; vmap.num_voxels() * c];
    let mut argmax = (mode == AggregateMode::Max).then(|| vec![0usize; vmap.num_voxels() * c]);
    for (j, members) in vmap.voxel_to_points.iter().enumerate() {
        let out = &mut values[j * c..(j + 1) * c];
        match mode {
            AggregateMode::Max => {
                let arg = &mut argmax.as_mut().unwrap()[j * c..(j + 1) * c];
                out.fill(f64::NEG_INFINITY);
                for &i in members {
                    for (k, &v) in feat.row(i).iter().enumerate() {
                        if v > out[k] {
                            out[k] = v;
                            arg[k] = i;
                        }
                    }
                }
            }
            AggregateMode::Mean | AggregateMode::Sum => {
                for &i in members {
                    for (o, &v) in out.iter_mut().zip(feat.row(i)) {
                        *o += v;
                    }
                }
                if mode == AggregateMode::Mean {
                    let n = members.len() as f64;
                    out.iter_mut().for_each(|o| *o /= n);
                }
            }
        }
    }
    Ok(Aggregated {
        map: FeatureMap {
            values,
            channels: c,
            resolution: Resolution::VoxelWise,
        },
        argmax,
    })
}

/// Broadcasts each voxel row to its member points; dropped points get zeros.
pub fn propagate(feat: &FeatureMap, vmap: &VoxelMap) -> Result<FeatureMap> {
    if feat.resolution != Resolution::VoxelWise || feat.rows() != vmap.num_voxels() {
        return Err(CoreError::Shape(format!(
            "propagate expects {} voxel rows, got {} {:?} rows",
            vmap.num_voxels(),
            feat.rows(),
            feat.resolution
        )));
    }
    let c = feat.channels;
    let mut values = Vec::with_capacity(vmap.num_points() * c);
    for v in &vmap.point_to_voxel {
        match v {
            Some(j) => values.extend_from_slice(feat.row(*j)),
            None => values.extend(std::iter::repeat_n(0.0, c)),
        }
    }
    Ok(FeatureMap {
        values,
        channels: c,
        resolution: Resolution::PointWise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::dynamic_voxelize;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn three_point_map() -> VoxelMap {
        VoxelMap {
            voxel_coords: vec![[0, 0, 0], [1, 0, 0]],
            point_to_voxel: vec![Some(0), Some(0), Some(1)],
            voxel_to_points: vec![vec![0, 1], vec![2]],
            counts: vec![2, 1],
        }
    }

    fn column(v: &[f64]) -> FeatureMap {
        FeatureMap::new(v.to_vec(), 1, Resolution::PointWise).unwrap()
    }

    #[test]
    fn augment_example_point() {
        // Two points share voxel (0,0,0) of a unit grid; centroid of the pair
        // is (0.45, 0.15, 0.25).
        let cloud = LabeledCloud::new("t", vec![[0.2, 0.2, 0.2], [0.7, 0.1, 0.3]]);
        let grid = VoxelGrid::new([0.0; 3], [1.0; 3], [1, 1, 1]).unwrap();
        let map = dynamic_voxelize(&cloud, &grid).unwrap();
        let f = augment_features(&cloud, &map, &grid, &AugmentFlags::default());
        assert_eq!(f.channels, 9);
        let expected = [0.2, 0.2, 0.2, -0.25, 0.05, -0.05, -0.3, -0.3, -0.3];
        for (a, b) in f.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let l2 = AugmentFlags {
            use_l2_norm: true,
            ..AugmentFlags::default()
        };
        let f = augment_features(&cloud, &map, &grid, &l2);
        assert_eq!(f.channels, 10);
        assert_abs_diff_eq!(f.row(0)[9], 0.34641, epsilon = 1e-5);
        let bare = augment_features(&cloud, &map, &grid, &AugmentFlags::coords_only());
        assert_eq!(bare.channels, 3);
        assert_eq!(bare.values, vec![0.2, 0.2, 0.2, 0.7, 0.1, 0.3]);
    }

    #[test]
    fn channel_counts() {
        let mut flags = AugmentFlags::coords_only();
        assert_eq!(flags.channels(), 3);
        flags.use_cluster_centroid = true;
        assert_eq!(flags.channels(), 6);
        flags.use_l2_norm = true;
        assert_eq!(flags.channels(), 7);
        flags.use_voxel_center = true;
        assert_eq!(flags.channels(), 10);
    }

    #[test]
    fn index_reference_subtracts_integers() {
        let cloud = LabeledCloud::new("t", vec![[1.5, 0.5, 0.5]]);
        let grid = VoxelGrid::new([0.0; 3], [1.0; 3], [2, 1, 1]).unwrap();
        let map = dynamic_voxelize(&cloud, &grid).unwrap();
        let flags = AugmentFlags {
            use_cluster_centroid: false,
            voxel_reference: VoxelReference::Index,
            ..AugmentFlags::default()
        };
        let f = augment_features(&cloud, &map, &grid, &flags);
        assert_eq!(f.row(0), &[1.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn scatter_modes() {
        let map = three_point_map();
        let f = column(&[1.0, 5.0, 3.0]);
        let max = scatter_aggregate(&f, &map, AggregateMode::Max).unwrap();
        assert_eq!(max.map.values, vec![5.0, 3.0]);
        assert_eq!(max.argmax, Some(vec![1, 2]));
        let mean = scatter_aggregate(&f, &map, AggregateMode::Mean).unwrap();
        assert_eq!(mean.map.values, vec![3.0, 3.0]);
        let sum = scatter_aggregate(&f, &map, AggregateMode::Sum).unwrap();
        assert_eq!(sum.map.values, vec![6.0, 3.0]);
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let map = three_point_map();
        let out = scatter_aggregate(&column(&[4.0, 4.0, 1.0]), &map, AggregateMode::Max).unwrap();
        assert_eq!(out.argmax, Some(vec![0, 2]));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("max".parse::<AggregateMode>().unwrap(), AggregateMode::Max);
        assert!(matches!(
            "median".parse::<AggregateMode>(),
            Err(CoreError::UnknownMode(_))
        ));
    }

    #[test]
    fn scatter_rejects_voxel_rows() {
        let map = three_point_map();
        let f = FeatureMap::new(vec![1.0, 2.0], 1, Resolution::VoxelWise).unwrap();
        assert!(scatter_aggregate(&f, &map, AggregateMode::Max).is_err());
        assert!(propagate(&column(&[1.0, 2.0, 3.0]), &map).is_err());
    }

    #[test]
    fn propagate_broadcasts() {
        let map = VoxelMap {
            voxel_coords: vec![[0, 0, 0]],
            point_to_voxel: vec![Some(0); 3],
            voxel_to_points: vec![vec![0, 1, 2]],
            counts: vec![3],
        };
        let f = FeatureMap::new(vec![7.0], 1, Resolution::VoxelWise).unwrap();
        assert_eq!(propagate(&f, &map).unwrap().values, vec![7.0; 3]);
    }

    #[test]
    fn propagate_after_max_loses_information() {
        let map = three_point_map();
        let f = column(&[1.0, 5.0, 3.0]);
        let agg = scatter_aggregate(&f, &map, AggregateMode::Max).unwrap();
        let back = propagate(&agg.map, &map).unwrap();
        assert_ne!(back, f);
    }

    #[test]
    fn singleton_voxels_round_trip() {
        let map = VoxelMap {
            voxel_coords: vec![[0, 0, 0], [1, 0, 0]],
            point_to_voxel: vec![Some(0), Some(1)],
            voxel_to_points: vec![vec![0], vec![1]],
            counts: vec![1, 1],
        };
        let f = FeatureMap::new(vec![1.0, -2.0, 3.0, 4.0], 2, Resolution::PointWise).unwrap();
        for mode in [AggregateMode::Max, AggregateMode::Mean, AggregateMode::Sum] {
            let agg = scatter_aggregate(&f, &map, mode).unwrap();
            assert_eq!(agg.map.values, f.values);
            assert_eq!(propagate(&agg.map, &map).unwrap(), f);
        }
    }

    proptest! {
        #[test]
        fn aggregation_is_idempotent_after_propagation(
            coords in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 1..80),
            seed in 0u64..1000,
        ) {
            let cloud = LabeledCloud::new("p", coords);
            let grid = VoxelGrid::fit(&cloud.coords, [0.25; 3]).unwrap();
            let map = dynamic_voxelize(&cloud, &grid).unwrap();
            let values: Vec<f64> = (0..cloud.len() * 2)
                .map(|k| ((k as u64 * 2654435761 + seed) % 1000) as f64 / 100.0)
                .collect();
            let f = FeatureMap::new(values, 2, Resolution::PointWise).unwrap();
            for mode in [AggregateMode::Max, AggregateMode::Mean] {
                let v = scatter_aggregate(&f, &map, mode).unwrap().map;
                let again = scatter_aggregate(&propagate(&v, &map).unwrap(), &map, mode).unwrap().map;
                if mode == AggregateMode::Max {
                    prop_assert_eq!(&again.values, &v.values);
                } else {
                    for (a, b) in again.values.iter().zip(&v.values) {
                        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn point_permutation_keeps_voxel_multiset(
            coords in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 2..60),
            rot in 1usize..59,
        ) {
            let n = coords.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let a = LabeledCloud::new("a", coords.clone());
            let b = LabeledCloud::new("b", perm.iter().map(|&i| coords[i]).collect());
            let grid = VoxelGrid::new([0.0; 3], [0.25; 3], [4, 4, 4]).unwrap();
            let flags = AugmentFlags::default();
            let ma = dynamic_voxelize(&a, &grid).unwrap();
            let mb = dynamic_voxelize(&b, &grid).unwrap();
            prop_assert_eq!(&ma.voxel_coords, &mb.voxel_coords);
            let fa = augment_features(&a, &ma, &grid, &flags);
            let fb = augment_features(&b, &mb, &grid, &flags);
            for (k, &i) in perm.iter().enumerate() {
                // Centroid sums run in a different order, so allow rounding.
                for (x, y) in fb.row(k).iter().zip(fa.row(i)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            let va = scatter_aggregate(&fa, &ma, AggregateMode::Max).unwrap().map;
            let vb = scatter_aggregate(&fb, &mb, AggregateMode::Max).unwrap().map;
            for (x, y) in va.values.iter().zip(&vb.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

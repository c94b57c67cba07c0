//! Voxel grids and the point/voxel assignment maps.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{bounds, LabeledCloud};
use crate::error::{CoreError, Result};

/// Padding subtracted from the cloud minimum when a grid is fitted to a cloud.
pub const GRID_PADDING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extent: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], extent: [usize; 3]) -> Result<Self> {
        if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CoreError::InvalidGrid(format!(
                "voxel size {voxel_size:?} must be positive"
            )));
        }
        if extent.contains(&0) {
            return Err(CoreError::InvalidGrid(format!(
                "extent {extent:?} must be at least 1"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(CoreError::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self {
            origin,
            voxel_size,
            extent,
        })
    }

    /// Grid whose origin is the cloud minimum minus [`GRID_PADDING`] and whose
    /// extent covers every point.
    pub fn fit(coords: &[[f64; 3]], voxel_size: [f64; 3]) -> Result<Self> {
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(CoreError::NonFinite { index: i });
        }
        let (lo, hi) = bounds(coords).ok_or(CoreError::Empty("cloud has no points"))?;
        let origin = lo.map(|v| v - GRID_PADDING);
        let mut extent = [1usize; 3];
        for a in 0..3 {
            if !(voxel_size[a] > 0.0) {
                return Err(CoreError::InvalidGrid(format!(
                    "voxel size {voxel_size:?} must be positive"
                )));
            }
            extent[a] = ((hi[a] - origin[a]) / voxel_size[a]).floor() as usize + 1;
        }
        Self::new(origin, voxel_size, extent)
    }

    /// Integer voxel coordinate of a point, or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[i64; 3]> {
        let mut v = [0i64; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.extent[a] as f64) {
                return None;
            }
            v[a] = f as i64;
        }
        Some(v)
    }

    pub fn center(&self, v: [i64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + (v[a] as f64 + 0.5) * self.voxel_size[a];
        }
        c
    }
}

/// Bidirectional assignment between points and occupied voxels.
///
/// Voxels are stored in lexicographic `(z, y, x)` order and each voxel's
/// point list is sorted ascending. Points dropped by hard voxelization map to
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub voxel_coords: Vec<[i64; 3]>,
    pub point_to_voxel: Vec<Option<usize>>,
    pub voxel_to_points: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

impl VoxelMap {
    pub fn num_voxels(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn num_retained(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Voxel index of every point, or `None` if any point was dropped.
    pub fn dense_assignment(&self) -> Option<Vec<usize>> {
        self.point_to_voxel.iter().copied().collect()
    }
}

/// Assigns every point to the voxel it occupies; no point is dropped.
pub fn dynamic_voxelize(cloud: &LabeledCloud, grid: &VoxelGrid) -> Result<VoxelMap> {
    voxelize_coords(&cloud.coords, grid)
}

pub(crate) fn voxelize_coords(coords: &[[f64; 3]], grid: &VoxelGrid) -> Result<VoxelMap> {
    let mut keyed = Vec::with_capacity(coords.len());
    for (i, p) in coords.iter().enumerate() {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::NonFinite { index: i });
        }
        let v = grid.locate(*p).ok_or(CoreError::OutOfBounds { index: i })?;
        keyed.push(([v[2], v[1], v[0]], i));
    }
    keyed.sort_unstable();

    let mut voxel_coords = Vec::new();
    let mut voxel_to_points: Vec<Vec<usize>> = Vec::new();
    let mut point_to_voxel = vec![None; coords.len()];
    let mut last = None;
    for (key, i) in keyed {
        if last != Some(key) {
            voxel_coords.push([key[2], key[1], key[0]]);
            voxel_to_points.push(Vec::new());
            last = Some(key);
        }
        let j = voxel_coords.len() - 1;
        voxel_to_points[j].push(i);
        point_to_voxel[i] = Some(j);
    }
    let counts = voxel_to_points.iter().map(Vec::len).collect();
    Ok(VoxelMap {
        voxel_coords,
        point_to_voxel,
        voxel_to_points,
        counts,
    })
}

/// Fixed-capacity voxelization: voxels holding more than `capacity` points
/// keep a uniform random subset of size `capacity` drawn from a generator
/// seeded with `seed`.
pub fn hard_voxelize(
    cloud: &LabeledCloud,
    grid: &VoxelGrid,
    capacity: usize,
    seed: u64,
) -> Result<VoxelMap> {
    if capacity == 0 {
        return Err(CoreError::InvalidGrid("voxel capacity must be >= 1".into()));
    }
    let mut map = dynamic_voxelize(cloud, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (j, members) in map.voxel_to_points.iter_mut().enumerate() {
        if members.len() <= capacity {
            continue;
        }
        let mut keep: Vec<usize> = sample(&mut rng, members.len(), capacity)
            .into_iter()
            .map(|k| members[k])
            .collect();
        keep.sort_unstable();
        for &i in members.iter() {
            if keep.binary_search(&i).is_err() {
                map.point_to_voxel[i] = None;
            }
        }
        *members = keep;
        map.counts[j] = capacity;
    }
    Ok(map)
}

/// Mean of the points sharing each point's voxel. Dropped points keep their
/// own coordinates.
pub fn cluster_centroids(cloud: &LabeledCloud, vmap: &VoxelMap) -> Vec<[f64; 3]> {
    let voxel_means: Vec<[f64; 3]> = vmap
        .voxel_to_points
        .iter()
        .map(|m| crate::cloud::mean_of(m.iter().map(|&i| cloud.coords[i])))
        .collect();
    vmap.point_to_voxel
        .iter()
        .zip(&cloud.coords)
        .map(|(v, p)| v.map_or(*p, |j| voxel_means[j]))
        .collect()
}

/// Metric center of every occupied voxel.
pub fn voxel_centers(vmap: &VoxelMap, grid: &VoxelGrid) -> Vec<[f64; 3]> {
    vmap.voxel_coords.iter().map(|&v| grid.center(v)).collect()
}

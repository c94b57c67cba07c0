//! Dense propagation, per-point classification, patch cropping and
//! region-slide inference.

use std::collections::BTreeMap;

use podseg_nn::{linear, mlp, Ctx, ParamInit, Real, Tape, Var, IGNORE_LABEL};
use std::sync::Arc;

use crate::config::{ModelConfig, PatchSpec};
use crate::dvfe::VoxelGroups;
use crate::error::{ModelError, Result};

pub fn init_semantic_head<T: Real>(init: &mut ParamInit<T>, cfg: &ModelConfig) -> Result<()> {
    init.mlp("head.point", cfg.in_channels(), cfg.point_width, cfg.point_width)?;
    init.linear("head.cls", cfg.point_feature_width(), cfg.num_classes)?;
    Ok(())
}

/// `G = [propagate(G^V), MLP(F)]`, one row per point.
pub fn dense_propagation<T: Real>(ctx: &Ctx<T>, gv: Var, groups: &VoxelGroups, features: Var) -> Result<Var> {
    let spread = ctx.tape.gather_rows(gv, groups.point_to_voxel.clone())?;
    let local = mlp(ctx, "head.point", features)?;
    Ok(ctx.tape.concat_cols(&[spread, local])?)
}

pub fn class_logits<T: Real>(ctx: &Ctx<T>, g: Var) -> Result<Var> {
    Ok(linear(ctx, "head.cls", g)?)
}

/// Per-point class distribution and its argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOutput {
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub labels: Vec<u32>,
}

/// Row-wise argmax; ties go to the lower class.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<u32> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

pub fn classify<T: Real>(ctx: &Ctx<T>, g: Var, num_classes: usize) -> Result<SemanticOutput> {
    let logits = class_logits(ctx, g)?;
    let probs = ctx.tape.softmax_rows(logits)?;
    let probs: Vec<f64> = ctx.tape.with_value(probs, |t| t.data().iter().map(|v| v.as_f64()).collect());
    let labels = argmax_rows(&probs, num_classes);
    Ok(SemanticOutput {
        probs,
        num_classes,
        labels,
    })
}

/// Mean negative log-likelihood of the ground-truth class.
pub fn semantic_loss<T: Real>(tape: &Tape<T>, probs: Var, labels: &[u32]) -> Result<Var> {
    Ok(tape.nll(probs, label_vec(labels))?)
}

pub(crate) fn label_vec(labels: &[u32]) -> Arc<Vec<usize>> {
    Arc::new(
        labels
            .iter()
            .map(|l| usize::try_from(*l).unwrap_or(IGNORE_LABEL))
            .collect(),
    )
}

/// An axis-aligned cube of a tiling and the points it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Integer position of the cube in its tiling.
    pub key: [i64; 3],
    /// Minimum corner.
    pub origin: [f64; 3],
    /// Indices into the source cloud, ascending.
    pub indices: Vec<usize>,
}

/// Tiling start and cube count for one axis.
fn axis_tiling(lo: f64, hi: f64, len: f64, offset: f64) -> (f64, usize) {
    let o = offset.rem_euclid(len);
    let start = if o > 0.0 { lo + o - len } else { lo };
    // tolerance keeps an exact multiple of len from opening an empty cube
    let n = (((hi - start) / len) - 1e-9).ceil().max(1.0) as usize;
    (start, n)
}

/// Cubes of side `len` tiling the bounding box from its minimum corner
/// displaced by `offset`. The last cube per axis also takes points on the
/// far face. Empty cubes are omitted; cubes are ordered by key.
pub fn crop_patches(coords: &[[f64; 3]], len: f64, offset: f64) -> Vec<Patch> {
    let Some((lo, hi)) = bounds(coords) else {
        return Vec::new();
    };
    let tiling: Vec<(f64, usize)> = (0..3).map(|a| axis_tiling(lo[a], hi[a], len, offset)).collect();
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in coords.iter().enumerate() {
        let mut key = [0i64; 3];
        for a in 0..3 {
            let (start, n) = tiling[a];
            let k = ((p[a] - start) / len).floor().max(0.0) as usize;
            key[a] = k.min(n - 1) as i64;
        }
        cells.entry(key).or_default().push(i);
    }
    cells
        .into_iter()
        .map(|(key, indices)| Patch {
            key,
            origin: [0, 1, 2].map(|a| tiling[a].0 + key[a] as f64 * len),
            indices,
        })
        .collect()
}

pub(crate) fn bounds(coords: &[[f64; 3]]) -> Option<([f64; 3], [f64; 3])> {
    let first = *coords.first()?;
    let mut lo = first;
    let mut hi = first;
    for p in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Some((lo, hi))
}

/// Moves the points of patches smaller than `min_points` into the nearest
/// patch (by cube key) that meets the minimum. Lower index wins ties.
pub fn merge_small_patches(mut patches: Vec<Patch>, min_points: usize) -> Vec<Patch> {
    let big: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].indices.len() >= min_points)
        .collect();
    if big.is_empty() {
        return patches;
    }
    let small: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].indices.len() < min_points)
        .collect();
    for &s in &small {
        let key = patches[s].key;
        let dist = |i: usize| {
            let k = patches[i].key;
            (0..3).map(|a| (k[a] - key[a]).pow(2)).sum::<i64>()
        };
        let target = *big.iter().min_by_key(|&&i| (dist(i), i)).expect("nonempty");
        let moved = std::mem::take(&mut patches[s].indices);
        patches[target].indices.extend(moved);
        patches[target].indices.sort_unstable();
    }
    patches.retain(|p| !p.indices.is_empty());
    patches
}

/// Tiling offsets swept by region-slide inference: multiples of the stride
/// below the patch length.
pub fn slide_offsets(spec: &PatchSpec) -> Vec<f64> {
    let n = ((spec.patch_len / spec.stride) - 1e-9).ceil().max(1.0) as usize;
    (0..n).map(|k| k as f64 * spec.stride).collect()
}

/// Per-point rows averaged over every patch visit.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideResult {
    pub mean: Vec<f64>,
    pub width: usize,
    pub visits: Vec<u32>,
}

/// Runs `predict` on every patch of every slide tiling and averages the
/// per-point rows it returns (`width` values per patch point).
pub fn region_slide<F>(coords: &[[f64; 3]], spec: &PatchSpec, width: usize, mut predict: F) -> Result<SlideResult>
where
    F: FnMut(&Patch) -> Result<Vec<f64>>,
{
    let n = coords.len();
    let mut sum = vec![0.0; n * width];
    let mut visits = vec![0u32; n];
    for offset in slide_offsets(spec) {
        for patch in crop_patches(coords, spec.patch_len, offset) {
            let rows = predict(&patch)?;
            if rows.len() != patch.indices.len() * width {
                return Err(ModelError::Internal(format!(
                    "patch prediction has {} values for {} points of width {width}",
                    rows.len(),
                    patch.indices.len()
                )));
            }
            for (k, &i) in patch.indices.iter().enumerate() {
                for (s, v) in sum[i * width..(i + 1) * width].iter_mut().zip(&rows[k * width..(k + 1) * width]) {
                    *s += v;
                }
                visits[i] += 1;
            }
        }
    }
    if let Some(i) = visits.iter().position(|v| *v == 0) {
        return Err(ModelError::Internal(format!("point {i} was not covered by any patch")));
    }
    for (i, v) in visits.iter().enumerate() {
        let inv = 1.0 / *v as f64;
        sum[i * width..(i + 1) * width].iter_mut().for_each(|s| *s *= inv);
    }
    Ok(SlideResult {
        mean: sum,
        width,
        visits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<[f64; 3]> {
        xs.iter().map(|x| [*x, 0.0, 0.0]).collect()
    }

    #[test]
    fn tiling_examples() {
        let c = line(&[0.0, 0.1, 0.2, 0.32]);
        let p = crop_patches(&c, 0.16, 0.0);
        let starts: Vec<f64> = p.iter().map(|p| p.origin[0]).collect();
        assert_eq!(starts, vec![0.0, 0.16]);
        assert_eq!(p[1].indices, vec![2, 3]);
        let p = crop_patches(&c, 0.16, 0.08);
        let starts: Vec<f64> = p.iter().map(|p| (p.origin[0] * 100.0).round() / 100.0).collect();
        assert_eq!(starts, vec![-0.08, 0.08, 0.24]);
    }

    #[test]
    fn merge_moves_points_to_nearest_big_patch() {
        let mk = |k: i64, idx: Vec<usize>| Patch {
            key: [k, 0, 0],
            origin: [0.0; 3],
            indices: idx,
        };
        let merged = merge_small_patches(vec![mk(0, (0..6).collect()), mk(1, vec![6]), mk(5, (7..13).collect())], 5);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].indices, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn argmax_ties_and_logistic() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.2, 0.8], 2), vec![0, 1]);
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p0 - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn stride_equal_to_length_visits_once() {
        let spec = PatchSpec {
            stride: 0.16,
            ..PatchSpec::default()
        };
        let c = line(&[0.0, 0.05, 0.3]);
        let r = region_slide(&c, &spec, 1, |p| Ok(vec![1.0; p.indices.len()])).unwrap();
        assert_eq!(r.visits, vec![1, 1, 1]);
        assert_eq!(slide_offsets(&PatchSpec::default()), vec![0.0, 0.08]);
    }
}

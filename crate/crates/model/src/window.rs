//! Dual window sets, occupancy sub-batches, position encoding and the
//! stack of windowed transformer blocks.

use std::collections::BTreeMap;
use std::sync::Arc;

use podseg_nn::{layer_norm, linear, mlp, window_self_attention, Ctx, ParamInit, Real, Segments, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::config::{ModelConfig, ShiftConvention};
use crate::error::{ModelError, Result};

/// Assignment of occupied voxels to non-overlapping windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPartition {
    /// Window index of each voxel.
    pub window_of: Vec<usize>,
    /// In-window integer offset of each voxel.
    pub offset: Vec<[usize; 3]>,
    /// Window coordinates, in ascending order.
    pub keys: Vec<[i64; 3]>,
    /// Member voxels of each window, ascending.
    pub windows: Vec<Vec<usize>>,
}

impl WindowPartition {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn valid_counts(&self) -> Vec<usize> {
        self.windows.iter().map(Vec::len).collect()
    }

    fn build(voxel_coords: &[[i64; 3]], window: [usize; 3], shift: [i64; 3]) -> Self {
        let size = window.map(|s| s as i64);
        let mut by_key: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        let mut offset = Vec::with_capacity(voxel_coords.len());
        for (i, v) in voxel_coords.iter().enumerate() {
            let mut key = [0i64; 3];
            let mut off = [0usize; 3];
            for a in 0..3 {
                let s = v[a] + shift[a];
                key[a] = s.div_euclid(size[a]);
                off[a] = s.rem_euclid(size[a]) as usize;
            }
            by_key.entry(key).or_default().push(i);
            offset.push(off);
        }
        let mut window_of = vec![0; voxel_coords.len()];
        let mut keys = Vec::with_capacity(by_key.len());
        let mut windows = Vec::with_capacity(by_key.len());
        for (w, (k, members)) in by_key.into_iter().enumerate() {
            for &m in &members {
                window_of[m] = w;
            }
            keys.push(k);
            windows.push(members);
        }
        Self {
            window_of,
            offset,
            keys,
            windows,
        }
    }
}

/// First window set: `floor(v / size)`.
pub fn partition_windows(voxel_coords: &[[i64; 3]], window: [usize; 3]) -> WindowPartition {
    WindowPartition::build(voxel_coords, window, [0; 3])
}

/// Second window set, displaced by half a window per axis.
pub fn shift_windows(voxel_coords: &[[i64; 3]], window: [usize; 3], convention: ShiftConvention) -> WindowPartition {
    let half = window.map(|s| (s / 2) as i64);
    let shift = match convention {
        ShiftConvention::AddHalf => half,
        ShiftConvention::SubtractHalf => half.map(|h| -h),
    };
    WindowPartition::build(voxel_coords, window, shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

/// Occupancy buckets for batching windows of similar size.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBatchSpec {
    pub phase: Phase,
    pub window_volume: usize,
    /// Largest valid count admitted by each bucket.
    pub edges: Vec<usize>,
    /// Padded length of each bucket.
    pub pads: Vec<usize>,
}

/// `ceil(volume * num / den)` without floating point.
fn frac_ceil(volume: usize, num: usize, den: usize) -> usize {
    (volume * num).div_ceil(den)
}

impl SubBatchSpec {
    pub fn new(phase: Phase, window_volume: usize) -> Self {
        let q = frac_ceil(window_volume, 1, 4);
        let h = frac_ceil(window_volume, 1, 2);
        let n = frac_ceil(window_volume, 9, 10);
        match phase {
            // The last training bucket admits full windows but pads (and
            // downsamples) to 0.9 of the volume.
            Phase::Training => Self {
                phase,
                window_volume,
                edges: vec![q, h, window_volume],
                pads: vec![q, h, n],
            },
            Phase::Inference => Self {
                phase,
                window_volume,
                edges: vec![q, h, n, window_volume],
                pads: vec![q, h, n, window_volume],
            },
        }
    }

    /// Bucket index for a window with `valid` occupied voxels.
    pub fn bucket_of(&self, valid: usize) -> usize {
        self.edges
            .iter()
            .position(|e| valid <= *e)
            .unwrap_or(self.edges.len() - 1)
    }
}

/// A window as batched: the kept voxels come first, the remaining
/// `pad - kept.len()` slots are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedWindow {
    pub window: usize,
    pub kept: Vec<usize>,
    /// Voxels removed by training-time downsampling.
    pub dropped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub pad: usize,
    pub windows: Vec<PaddedWindow>,
}

impl Bucket {
    /// Slot contents of one padded window: `Some(voxel)` or `None` for padding.
    pub fn slots(&self, w: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        let kept = &self.windows[w].kept;
        (0..self.pad).map(move |i| kept.get(i).copied())
    }
}

/// Places each window in its occupancy bucket. During training, windows
/// above the last bucket's pad are randomly downsampled to it; inference
/// never drops voxels.
pub fn assign_subbatches<R: Rng>(partition: &WindowPartition, spec: &SubBatchSpec, rng: &mut R) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = spec
        .pads
        .iter()
        .map(|&pad| Bucket {
            pad,
            windows: Vec::new(),
        })
        .collect();
    for (w, members) in partition.windows.iter().enumerate() {
        let b = spec.bucket_of(members.len());
        let pad = spec.pads[b];
        let (kept, dropped) = if members.len() > pad && spec.phase == Phase::Training {
            let mut keep = sample(rng, members.len(), pad).into_vec();
            keep.sort_unstable();
            let mut flag = vec![false; members.len()];
            keep.iter().for_each(|&i| flag[i] = true);
            let kept = keep.iter().map(|&i| members[i]).collect();
            let dropped = (0..members.len()).filter(|&i| !flag[i]).map(|i| members[i]).collect();
            (kept, dropped)
        } else {
            (members.clone(), Vec::new())
        };
        buckets[b].windows.push(PaddedWindow { window: w, kept, dropped });
    }
    buckets
}

/// Attention groups (kept voxels of every padded window) with `base` added
/// to each voxel index.
pub fn attention_groups(buckets: &[Bucket], base: usize, into: &mut Segments) {
    for b in buckets {
        for w in &b.windows {
            let rows: Vec<usize> = w.kept.iter().map(|v| v + base).collect();
            into.push(&rows);
        }
    }
}

const PE_TEMPERATURE: f64 = 10000.0;

/// Fixed sinusoidal encoding of in-window offsets. Each axis gets `c2 / 3`
/// channels of interleaved sine/cosine pairs at geometric frequencies of the
/// offset normalized to `[0, 2π)`.
pub fn position_encoding(offsets: &[[usize; 3]], window: [usize; 3], c2: usize) -> Result<Vec<f64>> {
    if c2 == 0 || c2 % 6 != 0 {
        return Err(ModelError::Config(format!(
            "position encoding width {c2} must be a positive multiple of 6"
        )));
    }
    let per_axis = c2 / 3;
    let freqs: Vec<f64> = (0..per_axis / 2)
        .map(|i| PE_TEMPERATURE.powf(2.0 * i as f64 / per_axis as f64))
        .collect();
    let mut out = Vec::with_capacity(offsets.len() * c2);
    for off in offsets {
        for a in 0..3 {
            let u = off[a] as f64 / window[a] as f64 * std::f64::consts::TAU;
            for f in &freqs {
                out.push((u / f).sin());
                out.push((u / f).cos());
            }
        }
    }
    Ok(out)
}

pub fn init_encoder<T: Real>(init: &mut ParamInit<T>, cfg: &ModelConfig) -> Result<()> {
    if cfg.c1 != cfg.c2 {
        init.linear("encoder.proj", cfg.c1, cfg.c2)?;
    }
    for b in 0..cfg.num_blocks {
        init_block(init, &format!("encoder.block{b}"), cfg)?;
    }
    Ok(())
}

pub fn init_block<T: Real>(init: &mut ParamInit<T>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    init.layer_norm(&format!("{prefix}.ln"), cfg.c2)?;
    init.attention(&format!("{prefix}.attn"), cfg.c2)?;
    init.mlp(&format!("{prefix}.mlp"), cfg.c2, cfg.mlp_hidden, cfg.c2)?;
    Ok(())
}

/// Attention inputs for one window set over a batch of voxels.
#[derive(Clone, Debug)]
pub struct WindowSet<T> {
    pub groups: Arc<Segments>,
    /// `N_V x C_2` position encoding of each voxel's in-window offset.
    pub pe: Tensor<T>,
}

/// `F~ = MSA(LN(F), PE) + F; F' = MLP(F~) + F~`.
pub fn dual_window_block<T: Real>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: Var,
    set: &WindowSet<T>,
    pe: Var,
    heads: usize,
) -> Result<Var> {
    let t = ctx.tape;
    let normed = layer_norm(ctx, &format!("{prefix}.ln"), x)?;
    let att = window_self_attention(ctx, &format!("{prefix}.attn"), normed, Some(pe), set.groups.clone(), heads)?;
    let mid = t.add(att, x)?;
    let m = mlp(ctx, &format!("{prefix}.mlp"), mid)?;
    Ok(t.add(m, mid)?)
}

/// Projects to `C_2` if needed, then alternates blocks over set 1 (even
/// blocks) and set 2 (odd blocks).
pub fn encoder_forward<T: Real>(ctx: &Ctx<T>, cfg: &ModelConfig, fv: Var, sets: &[WindowSet<T>; 2]) -> Result<Var> {
    let mut x = if cfg.c1 != cfg.c2 {
        linear(ctx, "encoder.proj", fv)?
    } else {
        fv
    };
    let pes = [ctx.tape.constant(sets[0].pe.clone()), ctx.tape.constant(sets[1].pe.clone())];
    for b in 0..cfg.num_blocks {
        let s = b % 2;
        x = dual_window_block(ctx, &format!("encoder.block{b}"), x, &sets[s], pes[s], cfg.heads)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_examples() {
        let p = partition_windows(&[[7, 3, 11], [0, 0, 0]], [6, 6, 12]);
        assert_eq!(p.keys, vec![[0, 0, 0], [1, 0, 0]]);
        assert_eq!(p.offset, vec![[1, 3, 11], [0, 0, 0]]);
        assert_eq!(p.window_of, vec![1, 0]);
        let s = shift_windows(&[[7, 3, 11], [0, 0, 0]], [6, 6, 12], ShiftConvention::AddHalf);
        assert_eq!(s.keys[s.window_of[0]], [1, 1, 1]);
        assert_eq!(s.keys[s.window_of[1]], [0, 0, 0]);
        assert_eq!(s.offset[1], [3, 3, 6]);
        assert_eq!(s.offset[0], [4, 0, 5]);
    }

    #[test]
    fn shifted_set_joins_across_boundary() {
        let vox = [[5, 0, 0], [6, 0, 0]];
        assert_eq!(partition_windows(&vox, [6, 6, 12]).num_windows(), 2);
        assert_eq!(shift_windows(&vox, [6, 6, 12], ShiftConvention::AddHalf).num_windows(), 1);
    }

    #[test]
    fn table_buckets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = SubBatchSpec::new(Phase::Training, 432);
        assert_eq!(t.pads, vec![108, 216, 389]);
        assert_eq!(t.bucket_of(100), 0);
        let vox: Vec<[i64; 3]> = (0..400).map(|i| [i % 6, (i / 6) % 6, i / 36]).collect();
        let p = partition_windows(&vox, [6, 6, 12]);
        let b = assign_subbatches(&p, &t, &mut rng);
        assert_eq!(b[2].windows[0].kept.len(), 389);
        assert_eq!(b[2].windows[0].dropped.len(), 11);
        let i = SubBatchSpec::new(Phase::Inference, 432);
        let b = assign_subbatches(&p, &i, &mut rng);
        assert_eq!(b[3].pad, 432);
        assert_eq!(b[3].windows[0].kept.len(), 400);
        assert_eq!(b[3].slots(0).filter(Option::is_none).count(), 32);
    }

    #[test]
    fn pe_origin_and_divisibility() {
        let pe = position_encoding(&[[0, 0, 0]], [6, 6, 12], 12).unwrap();
        for (i, v) in pe.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(position_encoding(&[[0, 0, 0]], [6, 6, 12], 64).is_err());
    }
}

//! Patch preparation, batching, the full forward pass and whole-plant
//! inference.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use podseg_core::{
    augment_features, dynamic_voxelize, FeatureMap, LabeledCloud, VoxelGrid, VoxelMap, VoxelReference,
};
use podseg_nn::{
    read_checkpoint, write_checkpoint, Ctx, ModelParams, OptimState, ParamInit, Real, Segments, Tape, Tensor, Var,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PatchSpec};
use crate::dvfe::{dvfe_forward, init_dvfe, VoxelGroups};
use crate::error::{ModelError, Result};
use crate::instance::{assign_instances, dual_set_cluster, init_instance_head, nms, offset_branch, score_logits, Proposal};
use crate::semantic::{
    argmax_rows, class_logits, crop_patches, dense_propagation, init_semantic_head, merge_small_patches, region_slide,
    Patch,
};
use crate::window::{
    assign_subbatches, attention_groups, encoder_forward, init_encoder, partition_windows, position_encoding,
    shift_windows, Phase, SubBatchSpec, WindowPartition, WindowSet,
};

/// Every parameter of the network, deterministically initialized.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut params = ModelParams::new(seed);
    let mut init = ParamInit::new(&mut params);
    init_dvfe(&mut init, cfg)?;
    init_encoder(&mut init, cfg)?;
    init_semantic_head(&mut init, cfg)?;
    init_instance_head(&mut init, cfg)?;
    Ok(params)
}

/// A patch voxelized and partitioned once, ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedPatch {
    /// Indices into the source cloud.
    pub indices: Vec<usize>,
    /// Source coordinates of the patch points.
    pub coords: Vec<[f64; 3]>,
    /// Corner subtracted from coordinates before feature augmentation.
    pub origin: [f64; 3],
    pub vmap: VoxelMap,
    pub features: FeatureMap,
    pub partitions: [WindowPartition; 2],
    pub sem: Option<Vec<u32>>,
    pub inst: Option<Vec<i32>>,
}

impl PreparedPatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Voxelizes a patch in coordinates local to its corner.
pub fn prepare_patch(cloud: &LabeledCloud, patch: &Patch, cfg: &ModelConfig) -> Result<PreparedPatch> {
    if patch.indices.is_empty() {
        return Err(ModelError::Internal("empty patch".into()));
    }
    let coords: Vec<[f64; 3]> = patch.indices.iter().map(|&i| cloud.coords[i]).collect();
    let mut origin = patch.origin;
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &coords {
        for a in 0..3 {
            origin[a] = origin[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let local: Vec<[f64; 3]> = coords.iter().map(|p| [0, 1, 2].map(|a| p[a] - origin[a])).collect();
    let extent = [0, 1, 2].map(|a| ((hi[a] - origin[a]) / cfg.voxel_size[a]).floor() as usize + 1);
    let grid = VoxelGrid::new([0.0; 3], cfg.voxel_size, extent)?;
    let local_cloud = LabeledCloud::new("patch", local);
    let vmap = dynamic_voxelize(&local_cloud, &grid)?;
    let mut features = augment_features(&local_cloud, &vmap, &grid, &cfg.flags);
    if cfg.standardize {
        standardize_features(&mut features, cfg);
    }
    let partitions = [
        partition_windows(&vmap.voxel_coords, cfg.window),
        shift_windows(&vmap.voxel_coords, cfg.window, cfg.shift),
    ];
    fn pick<L: Copy>(v: &Option<Vec<L>>, idx: &[usize]) -> Option<Vec<L>> {
        v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect())
    }
    Ok(PreparedPatch {
        indices: patch.indices.clone(),
        coords,
        origin,
        vmap,
        features,
        partitions,
        sem: pick(&cloud.sem, &patch.indices),
        inst: pick(&cloud.inst, &patch.indices),
    })
}

/// The patch rotated by a random angle about the vertical axis through the
/// middle of its box, mirrored in x with probability one half, and voxelized
/// again against the same corner.
pub fn augment_patch<R: Rng>(p: &PreparedPatch, cfg: &ModelConfig, rng: &mut R) -> Result<PreparedPatch> {
    let c = [0, 1].map(|a| {
        let hi = p.coords.iter().map(|q| q[a]).fold(f64::NEG_INFINITY, f64::max);
        (p.origin[a] + hi) / 2.0
    });
    let (s, co) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    let flip = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let coords: Vec<[f64; 3]> = p
        .coords
        .iter()
        .map(|q| {
            let (x, y) = (flip * (q[0] - c[0]), q[1] - c[1]);
            [c[0] + co * x - s * y, c[1] + s * x + co * y, q[2]]
        })
        .collect();
    let mut cloud = LabeledCloud::new("augmented", coords);
    cloud.sem = p.sem.clone();
    cloud.inst = p.inst.clone();
    let local = Patch { key: [0; 3], origin: p.origin, indices: (0..p.len()).collect() };
    let mut out = prepare_patch(&cloud, &local, cfg)?;
    out.indices = p.indices.clone();
    Ok(out)
}

/// Divides coordinates by the window extent and in-voxel offsets by the
/// voxel size, per axis, so every channel is of order one.
pub fn standardize_features(features: &mut FeatureMap, cfg: &ModelConfig) {
    let extent = [0, 1, 2].map(|a| cfg.voxel_size[a] * cfg.window[a] as f64);
    let mut scales: Vec<f64> = extent.to_vec();
    if cfg.flags.use_cluster_centroid {
        scales.extend(cfg.voxel_size);
    }
    if cfg.flags.use_voxel_center {
        match cfg.flags.voxel_reference {
            VoxelReference::Center => scales.extend(cfg.voxel_size),
            VoxelReference::Index => scales.extend(extent),
        }
    }
    if cfg.flags.use_l2_norm {
        scales.push(extent.iter().map(|e| e * e).sum::<f64>().sqrt());
    }
    for row in features.values.chunks_mut(features.channels) {
        for (v, s) in row.iter_mut().zip(&scales) {
            *v /= s;
        }
    }
}

/// Training patches of one cloud over every configured tiling offset, with
/// small patches merged into neighbors.
pub fn training_patches(cloud: &LabeledCloud, spec: &PatchSpec, cfg: &ModelConfig) -> Result<Vec<PreparedPatch>> {
    let mut out = Vec::new();
    for &offset in &spec.offsets {
        let patches = merge_small_patches(crop_patches(&cloud.coords, spec.patch_len, offset), spec.min_patch_points);
        for p in &patches {
            out.push(prepare_patch(cloud, p, cfg)?);
        }
    }
    Ok(out)
}

/// Several patches concatenated row-wise.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub features: Tensor<T>,
    pub groups: VoxelGroups,
    pub sets: [WindowSet<T>; 2],
    pub coords: Vec<[f64; 3]>,
    pub point_ranges: Vec<Range<usize>>,
    pub sem: Option<Vec<u32>>,
    pub inst: Option<Vec<i32>>,
    /// Voxels removed from attention by training-time downsampling, per set.
    pub dropped: [usize; 2],
}

pub fn assemble_batch<T: Real, R: Rng>(
    patches: &[&PreparedPatch],
    cfg: &ModelConfig,
    phase: Phase,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    let c0 = cfg.in_channels();
    let spec = SubBatchSpec::new(phase, cfg.window_volume());
    let mut features = Vec::new();
    let mut voxels = Segments::new();
    let mut p2v = Vec::new();
    let mut coords = Vec::new();
    let mut ranges = Vec::new();
    let mut groups = [Segments::new(), Segments::new()];
    let mut offsets: [Vec<[usize; 3]>; 2] = [Vec::new(), Vec::new()];
    let mut sem = Some(Vec::new());
    let mut inst = Some(Vec::new());
    let mut dropped = [0; 2];
    let (mut pbase, mut vbase) = (0, 0);
    for p in patches {
        if p.features.channels != c0 {
            return Err(ModelError::Config(format!(
                "patch has {} feature channels, model expects {c0}",
                p.features.channels
            )));
        }
        features.extend(p.features.values.iter().map(|v| T::lit(*v)));
        for members in &p.vmap.voxel_to_points {
            voxels.push(&members.iter().map(|m| m + pbase).collect::<Vec<_>>());
        }
        let dense = p
            .vmap
            .dense_assignment()
            .ok_or_else(|| ModelError::Internal("patch voxelization dropped points".into()))?;
        p2v.extend(dense.iter().map(|v| v + vbase));
        for s in 0..2 {
            let buckets = assign_subbatches(&p.partitions[s], &spec, rng);
            dropped[s] += buckets.iter().flat_map(|b| &b.windows).map(|w| w.dropped.len()).sum::<usize>();
            attention_groups(&buckets, vbase, &mut groups[s]);
            offsets[s].extend_from_slice(&p.partitions[s].offset);
        }
        coords.extend_from_slice(&p.coords);
        ranges.push(pbase..pbase + p.len());
        match (&mut sem, &p.sem) {
            (Some(all), Some(s)) => all.extend_from_slice(s),
            _ => sem = None,
        }
        match (&mut inst, &p.inst) {
            (Some(all), Some(s)) => all.extend_from_slice(s),
            _ => inst = None,
        }
        pbase += p.len();
        vbase += p.vmap.num_voxels();
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let [g0, g1] = groups;
    let [o0, o1] = offsets;
    let sets = [
        WindowSet {
            groups: Arc::new(g0),
            pe: Tensor::matrix(vbase, cfg.c2, to_t(position_encoding(&o0, cfg.window, cfg.c2)?))?,
        },
        WindowSet {
            groups: Arc::new(g1),
            pe: Tensor::matrix(vbase, cfg.c2, to_t(position_encoding(&o1, cfg.window, cfg.c2)?))?,
        },
    ];
    Ok(PatchBatch {
        features: Tensor::matrix(pbase, c0, features)?,
        groups: VoxelGroups {
            voxels: Arc::new(voxels),
            point_to_voxel: Arc::new(p2v),
        },
        sets,
        coords,
        point_ranges: ranges,
        sem,
        inst,
        dropped,
    })
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Encoded voxel features `G^V`.
    pub voxel: Var,
    /// Dense point features `G`.
    pub point: Var,
    pub logits: Var,
    pub offsets: Option<Var>,
}

pub fn forward<T: Real>(ctx: &Ctx<T>, cfg: &ModelConfig, batch: &PatchBatch<T>, with_offsets: bool) -> Result<Forward> {
    let x = ctx.tape.constant(batch.features.clone());
    let fv = dvfe_forward(ctx, cfg, x, &batch.groups)?;
    let gv = encoder_forward(ctx, cfg, fv, &batch.sets)?;
    let g = dense_propagation(ctx, gv, &batch.groups, x)?;
    let logits = class_logits(ctx, g)?;
    let offsets = if with_offsets { Some(offset_branch(ctx, g)?) } else { None };
    Ok(Forward {
        voxel: gv,
        point: g,
        logits,
        offsets,
    })
}

pub(crate) fn values_f64<T: Real>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.with_value(v, |t| t.data().iter().map(|x| x.as_f64()).collect())
}

/// Per-point outputs of one patch in inference mode: class probabilities,
/// then offsets and dense features when requested.
pub fn predict_patch(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    patch: &PreparedPatch,
    with_instance: bool,
) -> Result<Vec<f64>> {
    let tape = Tape::<f32>::new();
    let ctx = Ctx::new(&tape, params, false);
    // inference never samples; the generator is only part of the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = assemble_batch::<f32, _>(&[patch], cfg, Phase::Inference, &mut rng)?;
    let fw = forward(&ctx, cfg, &batch, with_instance)?;
    let probs = values_f64(&tape, tape.softmax_rows(fw.logits)?);
    if !with_instance {
        return Ok(probs);
    }
    let offsets = values_f64(&tape, fw.offsets.expect("requested"));
    let g = values_f64(&tape, fw.point);
    let (c, gw) = (cfg.num_classes, cfg.point_feature_width());
    let mut rows = Vec::with_capacity(patch.len() * (c + 3 + gw));
    for i in 0..patch.len() {
        rows.extend_from_slice(&probs[i * c..(i + 1) * c]);
        rows.extend_from_slice(&offsets[i * 3..(i + 1) * 3]);
        rows.extend_from_slice(&g[i * gw..(i + 1) * gw]);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    /// Proposals kept by NMS, with scores.
    pub proposals: Vec<Proposal>,
    pub inst: Vec<i32>,
    pub score: Vec<f64>,
}

impl InstancePrediction {
    /// Point sets of the predicted instances, in id order.
    pub fn instance_sets(&self) -> Vec<Vec<usize>> {
        crate::instance::instance_sets(&self.inst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantPrediction {
    pub probs: Vec<f64>,
    pub sem: Vec<u32>,
    pub visits: Vec<u32>,
    pub offsets: Option<Vec<[f64; 3]>>,
    /// Averaged dense features, row-major.
    pub features: Option<Vec<f64>>,
    pub instances: Option<InstancePrediction>,
}

/// Region-slide inference over a normalized cloud; with `with_instance`,
/// also offsets, proposals and per-point instance ids.
pub fn infer_plant(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    spec: &PatchSpec,
    cloud: &LabeledCloud,
    with_instance: bool,
) -> Result<PlantPrediction> {
    let (c, gw) = (cfg.num_classes, cfg.point_feature_width());
    let width = if with_instance { c + 3 + gw } else { c };
    let slide = region_slide(&cloud.coords, spec, width, |patch| {
        let prepared = prepare_patch(cloud, patch, cfg)?;
        predict_patch(params, cfg, &prepared, with_instance)
    })?;
    let n = cloud.len();
    let probs: Vec<f64> = (0..n).flat_map(|i| slide.mean[i * width..i * width + c].to_vec()).collect();
    let sem = argmax_rows(&probs, c);
    let mut out = PlantPrediction {
        probs,
        sem,
        visits: slide.visits,
        offsets: None,
        features: None,
        instances: None,
    };
    if with_instance {
        let offsets: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let r = &slide.mean[i * width + c..i * width + c + 3];
                [r[0], r[1], r[2]]
            })
            .collect();
        let features: Vec<f64> = (0..n)
            .flat_map(|i| slide.mean[i * width + c + 3..(i + 1) * width].to_vec())
            .collect();
        out.instances = Some(predict_instances(params, cfg, &cloud.coords, &out.sem, &offsets, &features)?);
        out.offsets = Some(offsets);
        out.features = Some(features);
    }
    Ok(out)
}

/// Clusters in both spaces, scores the proposals from dense features,
/// suppresses overlaps and assigns points to instances.
pub fn predict_instances(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    coords: &[[f64; 3]],
    sem: &[u32],
    offsets: &[[f64; 3]],
    features: &[f64],
) -> Result<InstancePrediction> {
    let shifted: Vec<[f64; 3]> = coords
        .iter()
        .zip(offsets)
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect();
    let mut proposals = dual_set_cluster(coords, &shifted, sem, &cfg.instance);
    if !proposals.is_empty() {
        let tape = Tape::<f32>::new();
        let ctx = Ctx::new(&tape, params, false);
        let gw = cfg.point_feature_width();
        let g = tape.constant(Tensor::matrix(
            coords.len(),
            gw,
            features.iter().map(|v| *v as f32).collect(),
        )?);
        let logits = score_logits(&ctx, g, coords, &proposals)?;
        let scores = values_f64(&tape, tape.sigmoid(logits));
        for (p, s) in proposals.iter_mut().zip(scores) {
            p.score = s;
        }
    }
    let kept = nms(&proposals, cfg.instance.nms_iou);
    let (inst, score) = assign_instances(coords.len(), &proposals, &kept);
    let proposals = kept.iter().map(|&k| proposals[k].clone()).collect();
    Ok(InstancePrediction { proposals, inst, score })
}

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

/// Writes parameters and, if given, the optimizer moments.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, opt: Option<&OptimState<f32>>) -> Result<()> {
    let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
    if let Some(o) = opt {
        for (prefix, map) in [(MOMENT_M, &o.m), (MOMENT_V, &o.v)] {
            for (name, values) in map {
                let shape = params.get(name)?.shape().to_vec();
                owned.push((format!("{prefix}{name}"), Tensor::new(shape, values.clone())?));
            }
        }
    }
    let entries = params.iter().chain(owned.iter().map(|(n, t)| (n.as_str(), t)));
    write_checkpoint(path, entries)?;
    Ok(())
}

/// Loaded checkpoint contents.
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub moments: Option<(
        std::collections::BTreeMap<String, Vec<f32>>,
        std::collections::BTreeMap<String, Vec<f32>>,
    )>,
}

/// Reads a checkpoint and checks it holds exactly the parameters `cfg`
/// defines, with matching shapes.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut params = init_params::<f32>(cfg, seed)?;
    let expected: std::collections::BTreeSet<String> = params.names().map(str::to_string).collect();
    let mut seen = std::collections::BTreeSet::new();
    let (mut m, mut v) = (std::collections::BTreeMap::new(), std::collections::BTreeMap::new());
    for (name, t) in read_checkpoint(path)? {
        if let Some(p) = name.strip_prefix(MOMENT_M) {
            m.insert(p.to_string(), t.into_data());
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            v.insert(p.to_string(), t.into_data());
        } else {
            if !expected.contains(&name) {
                return Err(ModelError::Config(format!(
                    "checkpoint {} has unexpected tensor `{name}`",
                    path.display()
                )));
            }
            params.replace(&name, t).map_err(|e| {
                ModelError::Config(format!("checkpoint {} does not match the model: {e}", path.display()))
            })?;
            seen.insert(name);
        }
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(ModelError::Config(format!(
            "checkpoint {} lacks tensor `{missing}`",
            path.display()
        )));
    }
    if !params.all_finite() {
        return Err(ModelError::Config(format!("checkpoint {} holds non-finite values", path.display())));
    }
    let moments = (!m.is_empty() || !v.is_empty()).then_some((m, v));
    Ok(Checkpoint { params, moments })
}

//! The five subcommands as library functions.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use podseg_core::dataset::{
    generate_plant, make_splits, normalize_unit_cube, read_cloud, read_manifest, write_cloud, write_manifest,
    DatasetSplit, NormalizeTransform, SplitMode,
};
use podseg_core::metrics::{
    count_detected, instance_metrics, rmse, semantic_metrics, voxel_class_proportions, SemanticReport,
    INSTANCE_THRESHOLDS,
};
use podseg_core::{AugmentFlags, LabeledCloud, VoxelGrid, VoxelReference};
use podseg_model::instance::{export_shift_diagnostics, instance_sets, write_instance_predictions};
use podseg_model::network::{infer_plant, load_checkpoint, prepare_patch, training_patches, PreparedPatch};
use podseg_model::semantic::{crop_patches, merge_small_patches};
use podseg_model::train::{EpochRecord, Trainer};
use podseg_model::{ModelConfig, PatchSpec, TrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::export::{instance_color, semantic_color, write_ply};

/// An error caused by how the command was invoked rather than by its data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";
pub const TRAIN_LOG: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join(CONFIG_ECHO), &cfg.render())
}

/// Per-plant generator seeds drawn from the run seed.
pub fn plant_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn plant_id(k: usize) -> String {
    format!("plant_{:03}", k + 1)
}

/// Writes `n` raw (metric) labeled plants, a split manifest and the
/// effective config. Returns the plant ids.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    if cfg.n == 0 {
        return Err(UsageError("synth needs n >= 1".into()).into());
    }
    create_dir(out)?;
    let ids: Vec<String> = (0..cfg.n).map(plant_id).collect();
    for (id, seed) in ids.iter().zip(plant_seeds(cfg.seed, cfg.n)) {
        let (mut cloud, _) = generate_plant(&cfg.plant.clone().with_seed(seed))?;
        cloud.id = id.clone();
        write_cloud(&cloud, out.join(format!("{id}.txt")))?;
    }
    let split = match (cfg.split, cfg.n) {
        (SplitMode::Fixed, n) if n < 3 => DatasetSplit::Fixed {
            ids: ids.clone(),
            train: (0..n).collect(),
            val: Vec::new(),
            test: Vec::new(),
        },
        (mode, _) => make_splits(&ids, mode, cfg.seed)?,
    };
    write_manifest(&split, out.join(MANIFEST))?;
    echo_config(cfg, out)?;
    Ok(ids)
}

/// A dataset plant in normalized coordinates.
pub struct Plant {
    pub id: String,
    pub cloud: LabeledCloud,
    pub transform: NormalizeTransform,
}

pub fn load_plant(path: &Path) -> Result<Plant> {
    let raw = read_cloud(path)?;
    let (cloud, transform) = normalize_unit_cube(&raw).with_context(|| format!("cannot normalize {}", path.display()))?;
    Ok(Plant {
        id: raw.id,
        cloud,
        transform,
    })
}

/// Training and validation plants according to the manifest.
pub fn load_split(cfg: &RunConfig, data: &Path) -> Result<(Vec<Plant>, Vec<Plant>)> {
    let manifest = read_manifest(data.join(MANIFEST))?;
    let folded = manifest.iter().any(|(_, p)| p.starts_with("fold"));
    let val_part = format!("fold{}", cfg.fold);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, part) in &manifest {
        let to = match (folded, part.as_str()) {
            (false, "train") => &mut train,
            (false, "val") => &mut val,
            (false, _) => continue,
            (true, p) if p == val_part => &mut val,
            (true, _) => &mut train,
        };
        let plant = load_plant(&data.join(format!("{id}.txt")))?;
        plant.cloud.validate(cfg.model.num_classes)?;
        ensure!(
            plant.cloud.sem.is_some(),
            "training plant {id} has no semantic labels"
        );
        to.push(plant);
    }
    ensure!(!train.is_empty(), "manifest in {} lists no training plants", data.display());
    Ok((train, val))
}

/// Non-overlapping patches of one tiling for validation.
pub fn eval_patches(cloud: &LabeledCloud, spec: &PatchSpec, model: &ModelConfig) -> Result<Vec<PreparedPatch>> {
    merge_small_patches(crop_patches(&cloud.coords, spec.patch_len, 0.0), spec.min_patch_points)
        .iter()
        .map(|p| Ok(prepare_patch(cloud, p, model)?))
        .collect()
}

#[derive(Serialize)]
struct LogLine<'a> {
    variant: String,
    backbone_frozen: bool,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Trains on the manifest's training plants, logging one JSON line per
/// epoch and keeping the best-by-validation-loss and latest checkpoints.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<Vec<EpochRecord>> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let (train, val) = load_split(cfg, data)?;
    let mut patches = Vec::new();
    for p in &train {
        patches.extend(training_patches(&p.cloud, &cfg.patch, &cfg.model)?);
    }
    let mut val_patches = Vec::new();
    for p in &val {
        val_patches.extend(eval_patches(&p.cloud, &cfg.patch, &cfg.model)?);
    }
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.model.clone(), cfg.train.clone(), path)?,
        None => {
            // a fresh run starts a fresh log
            let _ = std::fs::remove_file(out.join(TRAIN_LOG));
            Trainer::new(cfg.model.clone(), cfg.train.clone())?
        }
    };
    let log_path = out.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))?;
    let records = trainer.fit(&patches, &val_patches, |record, t| {
        let line = LogLine {
            variant: t.train.variant.to_string(),
            backbone_frozen: !t.schedule(record.epoch).frozen.is_empty(),
            record,
        };
        let text = serde_json::to_string(&line).map_err(|e| podseg_model::ModelError::Internal(e.to_string()))?;
        writeln!(log, "{text}").map_err(|e| podseg_model::ModelError::Internal(e.to_string()))?;
        if verbose {
            println!("{text}");
        }
        t.save(&out.join(LAST_CHECKPOINT))?;
        if record.best {
            t.save(&out.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    })?;
    Ok(records)
}

/// Cloud files of a directory: `<id>.txt` with a dot-free id, excluding the
/// manifest and config echo.
pub fn cloud_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(stem) = name.strip_suffix(".txt") {
            if !stem.contains('.') && name != MANIFEST && name != CONFIG_ECHO && path.is_file() {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct InferSummary {
    pub id: String,
    pub points: usize,
    pub instances: Option<usize>,
}

/// Region-slide inference over one cloud file or every cloud of a
/// directory. Writes `<id>.txt` (predicted labels in the input frame),
/// `<id>.ply`, and for instance variants `<id>.inst.txt` and
/// `<id>.shift.txt`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<Vec<InferSummary>> {
    let params = load_checkpoint(checkpoint, &cfg.model, cfg.seed)?.params;
    let inputs = if input.is_dir() {
        cloud_files(input)?
    } else {
        let raw = read_cloud(input)?;
        vec![(raw.id, input.to_path_buf())]
    };
    ensure!(!inputs.is_empty(), "no cloud files in {}", input.display());
    create_dir(out)?;
    echo_config(cfg, out)?;
    let with_instance = cfg.train.variant.has_instance_head();
    let mut summaries = Vec::new();
    for (id, path) in inputs {
        let plant = load_plant(&path)?;
        let pred = infer_plant(&params, &cfg.model, &cfg.patch, &plant.cloud, with_instance)?;
        let original: Vec<[f64; 3]> = plant.cloud.coords.iter().map(|p| plant.transform.invert(*p)).collect();
        let mut result = LabeledCloud::new(id.clone(), original.clone()).with_sem(pred.sem.clone());
        let mut colors: Vec<[u8; 3]> = pred.sem.iter().map(|c| semantic_color(*c)).collect();
        let mut instances = None;
        if let (Some(inst), Some(offsets)) = (&pred.instances, &pred.offsets) {
            result = result.with_inst(inst.inst.clone());
            colors = inst.inst.iter().map(|i| instance_color(*i)).collect();
            write_instance_predictions(&out.join(format!("{id}.inst.txt")), &original, &pred.sem, &inst.inst, &inst.score)?;
            let shifted: Vec<[f64; 3]> = plant
                .cloud
                .coords
                .iter()
                .zip(offsets)
                .map(|(p, o)| plant.transform.invert([p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
                .collect();
            export_shift_diagnostics(&out.join(format!("{id}.shift.txt")), &original, &shifted, &pred.sem)?;
            instances = Some(inst.proposals.len());
        }
        write_cloud(&result, out.join(format!("{id}.txt")))?;
        write_ply(&out.join(format!("{id}.ply")), &original, &colors)?;
        summaries.push(InferSummary {
            id,
            points: original.len(),
            instances,
        });
    }
    Ok(summaries)
}

#[derive(Clone, Debug)]
pub struct PlantEval {
    pub id: String,
    pub semantic: SemanticReport,
    pub instance: Option<podseg_core::metrics::InstanceReport>,
    pub detected: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub plants: Vec<PlantEval>,
    pub overall: SemanticReport,
    /// Mean instance metrics over plants with instance predictions.
    pub mcov: Option<f64>,
    pub mwcov: Option<f64>,
    pub count_rmse: Option<f64>,
}

/// Counting threshold for detected instances.
pub const COUNT_IOU: f64 = 0.75;

/// Compares predicted clouds with ground-truth clouds of the same ids.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let preds = cloud_files(pred_dir)?;
    if preds.is_empty() {
        bail!("no prediction files in {}", pred_dir.display());
    }
    let gts: std::collections::BTreeMap<String, PathBuf> = cloud_files(gt_dir)?.into_iter().collect();
    let c = cfg.model.num_classes;
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    let mut plants = Vec::new();
    for (id, path) in &preds {
        let gt_path = gts
            .get(id)
            .ok_or_else(|| anyhow::anyhow!("prediction `{id}` has no ground truth in {}", gt_dir.display()))?;
        let pred = read_cloud(path)?;
        let gt = read_cloud(gt_path)?;
        ensure!(
            pred.len() == gt.len(),
            "`{id}`: {} predicted points but {} ground-truth points",
            pred.len(),
            gt.len()
        );
        let ps = pred.sem.as_ref().with_context(|| format!("`{id}` prediction has no labels"))?;
        let gs = gt.sem.as_ref().with_context(|| format!("`{id}` ground truth has no labels"))?;
        all_pred.extend_from_slice(ps);
        all_gt.extend_from_slice(gs);
        let semantic = semantic_metrics(ps, gs, c)?;
        let (mut instance, mut detected) = (None, None);
        if let (Some(pi), Some(gi)) = (&pred.inst, &gt.inst) {
            let (ps, gs) = (instance_sets(pi), instance_sets(gi));
            if !gs.is_empty() {
                instance = Some(instance_metrics(&ps, &gs, &INSTANCE_THRESHOLDS, cfg.matching)?);
                detected = Some((count_detected(&ps, &gs, COUNT_IOU), gs.len()));
            }
        }
        plants.push(PlantEval {
            id: id.clone(),
            semantic,
            instance,
            detected,
        });
    }
    let overall = semantic_metrics(&all_pred, &all_gt, c)?;
    let with_inst: Vec<&podseg_core::metrics::InstanceReport> = plants.iter().filter_map(|p| p.instance.as_ref()).collect();
    let mean = |f: fn(&podseg_core::metrics::InstanceReport) -> f64| {
        (!with_inst.is_empty()).then(|| with_inst.iter().map(|r| f(r)).sum::<f64>() / with_inst.len() as f64)
    };
    let counts: Vec<(usize, usize)> = plants.iter().filter_map(|p| p.detected).collect();
    let count_rmse = if counts.is_empty() {
        None
    } else {
        let (a, b): (Vec<usize>, Vec<usize>) = counts.into_iter().unzip();
        Some(rmse(&a, &b)?)
    };
    let report = EvalReport {
        mcov: mean(|r| r.mcov),
        mwcov: mean(|r| r.mwcov),
        plants,
        overall,
        count_rmse,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("report.csv"), &eval_csv(&report))?;
        write_text(&dir.join("report.txt"), &eval_table(&report))?;
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("id,miou,mprec,mrec,mf1,oacc,mcov,mwcov,detected,gt_instances\n");
    let row = |s: &mut String, id: &str, m: &SemanticReport, inst: Option<&podseg_core::metrics::InstanceReport>, det: Option<(usize, usize)>| {
        let _ = writeln!(
            s,
            "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            m.mean.iou,
            m.mean.precision,
            m.mean.recall,
            m.mean.f1,
            m.overall_accuracy,
            opt(inst.map(|i| i.mcov)),
            opt(inst.map(|i| i.mwcov)),
            det.map_or(String::new(), |d| d.0.to_string()),
            det.map_or(String::new(), |d| d.1.to_string()),
        );
    };
    for p in &r.plants {
        row(&mut s, &p.id, &p.semantic, p.instance.as_ref(), p.detected);
    }
    let _ = writeln!(
        s,
        "all,{:.6},{:.6},{:.6},{:.6},{:.6},{},{},,",
        r.overall.mean.iou,
        r.overall.mean.precision,
        r.overall.mean.recall,
        r.overall.mean.f1,
        r.overall.overall_accuracy,
        opt(r.mcov),
        opt(r.mwcov)
    );
    s
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8}", "class", "IoU", "Prec", "Rec", "F1");
    for (k, c) in r.overall.per_class.iter().enumerate() {
        let name = match k {
            0 => "other".to_string(),
            1 => "silique".to_string(),
            _ => format!("class{k}"),
        };
        let _ = writeln!(
            s,
            "{name:<8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            100.0 * c.iou,
            100.0 * c.precision,
            100.0 * c.recall,
            100.0 * c.f1
        );
    }
    let m = &r.overall.mean;
    let _ = writeln!(
        s,
        "{:<8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
        "mean",
        100.0 * m.iou,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f1
    );
    let _ = writeln!(s, "oAcc {:.2}", 100.0 * r.overall.overall_accuracy);
    if let (Some(c), Some(w)) = (r.mcov, r.mwcov) {
        let _ = writeln!(s, "mCov {:.2}  mWCov {:.2}", 100.0 * c, 100.0 * w);
    }
    if let Some(e) = r.count_rmse {
        let _ = writeln!(s, "count RMSE at IoU>{COUNT_IOU} {e:.3}");
    }
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatureRow {
    pub cluster_centroid: bool,
    pub voxel_center: bool,
    pub l2_norm: bool,
    pub channels: usize,
    pub miou: f64,
    pub oacc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ShapeRow {
    pub seed: u64,
    pub shape: String,
    pub voxel_size: [f64; 3],
    pub voxels: usize,
    pub silique_before: f64,
    pub silique_after: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub features: Vec<FeatureRow>,
    pub shapes: Vec<ShapeRow>,
    /// Plants on which the flat voxel shifts class proportions less than
    /// the cubic one.
    pub flat_beats_cubic: usize,
    pub plants: usize,
}

/// The four augmented-feature settings, in table order.
pub fn feature_rows() -> [AugmentFlags; 4] {
    let f = |v: bool, l: bool| AugmentFlags {
        use_cluster_centroid: true,
        use_voxel_center: v,
        use_l2_norm: l,
        voxel_reference: VoxelReference::Center,
    };
    [f(false, false), f(false, true), f(true, false), f(true, true)]
}

/// Voxel shapes compared for class-proportion preservation.
pub fn voxel_shapes() -> [(&'static str, [f64; 3]); 4] {
    [
        ("l=w>h", [0.006, 0.006, 0.0025]),
        ("l>w=h", [0.006, 0.0025, 0.006]),
        ("l<w=h", [0.0025, 0.006, 0.006]),
        ("l=w=h", [0.0045, 0.0045, 0.0045]),
    ]
}

/// Feature-flag ablation (train then region-slide evaluate per row) and
/// the voxel-shape class-proportion comparison.
pub fn cmd_ablate(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<AblationReport> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let (train, val) = match data {
        Some(dir) => load_split(cfg, dir)?,
        None => synthetic_split(cfg)?,
    };
    let eval_on = if val.is_empty() { &train } else { &val };
    let mut features = Vec::new();
    for flags in feature_rows() {
        let model = ModelConfig {
            flags,
            ..cfg.model.clone()
        };
        let tc = TrainConfig {
            epochs: cfg.ablate_epochs,
            eval_every: cfg.ablate_epochs.max(1),
            variant: podseg_model::Variant::Pst,
            ..cfg.train.clone()
        };
        let mut patches = Vec::new();
        for p in &train {
            patches.extend(training_patches(&p.cloud, &cfg.patch, &model)?);
        }
        let mut trainer = Trainer::new(model.clone(), tc)?;
        if cfg.ablate_epochs > 0 {
            trainer.fit(&patches, &[], |_, _| Ok(()))?;
        }
        let (mut pred, mut gt) = (Vec::new(), Vec::new());
        for p in eval_on {
            let r = infer_plant(&trainer.params, &model, &cfg.patch, &p.cloud, false)?;
            pred.extend(r.sem);
            gt.extend_from_slice(p.cloud.sem.as_ref().expect("validated"));
        }
        let m = semantic_metrics(&pred, &gt, model.num_classes)?;
        features.push(FeatureRow {
            cluster_centroid: flags.use_cluster_centroid,
            voxel_center: flags.use_voxel_center,
            l2_norm: flags.use_l2_norm,
            channels: flags.channels(),
            miou: m.mean.iou,
            oacc: m.overall_accuracy,
        });
    }
    let mut shapes = Vec::new();
    let mut flat_beats_cubic = 0;
    let seeds = plant_seeds(cfg.seed ^ 0x5eed_5a9e, cfg.ablate_seeds);
    for &seed in &seeds {
        let (raw, _) = generate_plant(&cfg.plant.clone().with_seed(seed))?;
        let (cloud, _) = normalize_unit_cube(&raw)?;
        let mut l1 = Vec::new();
        for (name, size) in voxel_shapes() {
            let grid = VoxelGrid::fit(&cloud.coords, size)?;
            let p = voxel_class_proportions(&cloud, &grid, cfg.model.num_classes)?;
            l1.push(p.l1_shift());
            let sil = podseg_core::SILIQUE as usize;
            shapes.push(ShapeRow {
                seed,
                shape: name.to_string(),
                voxel_size: size,
                voxels: p.num_voxels,
                silique_before: p.before[sil],
                silique_after: p.after[sil],
                l1: p.l1_shift(),
            });
        }
        if l1[0] < l1[3] {
            flat_beats_cubic += 1;
        }
    }
    let report = AblationReport {
        features,
        shapes,
        flat_beats_cubic,
        plants: seeds.len(),
    };
    write_text(&out.join("ablation_features.csv"), &features_csv(&report))?;
    write_text(&out.join("voxel_shapes.csv"), &shapes_csv(&report))?;
    write_text(&out.join("ablation.txt"), &ablation_table(&report))?;
    Ok(report)
}

/// Plants generated in memory when the ablation runs without a dataset:
/// three quarters train, the rest validation.
fn synthetic_split(cfg: &RunConfig) -> Result<(Vec<Plant>, Vec<Plant>)> {
    let n = cfg.ablate_plants.max(1);
    let n_train = (3 * n).div_ceil(4).min(n);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, seed) in plant_seeds(cfg.seed, n).into_iter().enumerate() {
        let (raw, _) = generate_plant(&cfg.plant.clone().with_seed(seed))?;
        let (cloud, transform) = normalize_unit_cube(&raw)?;
        let plant = Plant {
            id: plant_id(k),
            cloud,
            transform,
        };
        if k < n_train {
            train.push(plant);
        } else {
            val.push(plant);
        }
    }
    Ok((train, val))
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

pub fn features_csv(r: &AblationReport) -> String {
    let mut s = String::from("cluster_centroid,voxel_center,l2_norm,channels,miou,oacc\n");
    for f in &r.features {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            f.cluster_centroid, f.voxel_center, f.l2_norm, f.channels, f.miou, f.oacc
        );
    }
    s
}

pub fn shapes_csv(r: &AblationReport) -> String {
    let mut s = String::from("seed,shape,voxel_x,voxel_y,voxel_z,voxels,silique_before,silique_after,l1\n");
    for v in &r.shapes {
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?},{},{:.6},{:.6},{:.6}",
            v.seed, v.shape, v.voxel_size[0], v.voxel_size[1], v.voxel_size[2], v.voxels, v.silique_before, v.silique_after, v.l1
        );
    }
    s
}

pub fn ablation_table(r: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", "cluster", "voxel", "l2", "mIoU");
    for f in &r.features {
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8.2}",
            mark(f.cluster_centroid),
            mark(f.voxel_center),
            mark(f.l2_norm),
            100.0 * f.miou
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:>10} {:>10}", "shape", "mean L1", "voxels");
    for (name, _) in voxel_shapes() {
        let rows: Vec<&ShapeRow> = r.shapes.iter().filter(|v| v.shape == name).collect();
        let n = rows.len().max(1) as f64;
        let _ = writeln!(
            s,
            "{name:<8} {:>10.5} {:>10.0}",
            rows.iter().map(|v| v.l1).sum::<f64>() / n,
            rows.iter().map(|v| v.voxels as f64).sum::<f64>() / n
        );
    }
    let _ = writeln!(
        s,
        "flat closer than cubic on {} of {} plants",
        r.flat_beats_cubic, r.plants
    );
    s
}

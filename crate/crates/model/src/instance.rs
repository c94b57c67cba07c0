//! Offset regression, dual-space clustering, proposal scoring, NMS and the
//! two-stage training schedule.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use petgraph::unionfind::UnionFind;
use podseg_core::metrics::point_iou;
use podseg_core::SILIQUE;
use podseg_nn::{mlp, Ctx, ParamInit, Real, Segments, Tape, Tensor, Var};

use crate::config::{InstanceConfig, ModelConfig, Variant};
use crate::error::{ModelError, Result};

/// Parameter prefixes of the semantic backbone.
pub const BACKBONE_PREFIXES: [&str; 3] = ["dvfe.", "encoder.", "head."];

pub fn init_instance_head<T: Real>(init: &mut ParamInit<T>, cfg: &ModelConfig) -> Result<()> {
    let g = cfg.point_feature_width();
    let i = &cfg.instance;
    init.mlp("inst.offset", g, i.offset_hidden, 3)?;
    init.mlp("inst.score.feat", g, i.c3, i.c3)?;
    init.mlp("inst.score.head", i.c3 + 3, i.score_hidden, 1)?;
    Ok(())
}

/// Per-point 3-D offsets toward the instance centroid.
pub fn offset_branch<T: Real>(ctx: &Ctx<T>, g: Var) -> Result<Var> {
    Ok(mlp(ctx, "inst.offset", g)?)
}

/// Regression targets `c - p` and a mask of points that belong to an
/// instance. Centroids are taken over the given points only.
pub fn offset_targets(coords: &[[f64; 3]], inst: &[i32]) -> (Vec<f64>, Vec<bool>) {
    let mut sums: HashMap<i32, ([f64; 3], usize)> = HashMap::new();
    for (p, &id) in coords.iter().zip(inst) {
        if id >= 0 {
            let e = sums.entry(id).or_insert(([0.0; 3], 0));
            for a in 0..3 {
                e.0[a] += p[a];
            }
            e.1 += 1;
        }
    }
    let mut target = vec![0.0; coords.len() * 3];
    let mut mask = vec![false; coords.len()];
    for (i, (p, &id)) in coords.iter().zip(inst).enumerate() {
        if let Some((s, n)) = sums.get(&id) {
            for a in 0..3 {
                target[i * 3 + a] = s[a] / *n as f64 - p[a];
            }
            mask[i] = true;
        }
    }
    (target, mask)
}

/// `(L1 regression, negative cosine direction)` losses over masked points.
pub fn offset_losses<T: Real>(tape: &Tape<T>, os: Var, target: &[f64], mask: &[bool]) -> Result<(Var, Var)> {
    let t: Arc<Vec<T>> = Arc::new(target.iter().map(|v| T::lit(*v)).collect());
    let m = Arc::new(mask.to_vec());
    let reg = tape.offset_l1(os, t.clone(), m.clone())?;
    let dir = tape.offset_direction(os, t, m)?;
    Ok((reg, dir))
}

/// A connected component of same-class points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub class: u32,
}

/// Components of the graph joining same-class points within distance `r`,
/// restricted to `classes`. Components below `min_points` are discarded.
/// Clusters are ordered by their smallest member.
pub fn cluster_points(coords: &[[f64; 3]], sem: &[u32], classes: &[u32], r: f64, min_points: usize) -> Vec<Cluster> {
    let active: Vec<usize> = (0..coords.len()).filter(|&i| classes.contains(&sem[i])).collect();
    let cell = |p: &[f64; 3]| p.map(|c| (c / r).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for &i in &active {
        grid.entry(cell(&coords[i])).or_default().push(i);
    }
    let r2 = r * r;
    let mut uf = UnionFind::<usize>::new(coords.len());
    for &i in &active {
        let c = cell(&coords[i]);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > i && sem[j] == sem[i] && dist2(&coords[i], &coords[j]) <= r2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
    let mut comps: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in &active {
        comps.entry(uf.find_mut(i)).or_default().push(i);
    }
    let mut out: Vec<Cluster> = comps
        .into_values()
        .filter(|m| m.len() >= min_points)
        .map(|members| Cluster {
            class: sem[members[0]],
            members,
        })
        .collect();
    out.sort_by_key(|c| c.members[0]);
    out
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Original,
    Shifted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    /// Indices of original points, ascending.
    pub members: Vec<usize>,
    pub space: Space,
    pub class: u32,
    pub score: f64,
}

/// Silique clusters found in the original coordinates followed by those
/// found in the shifted coordinates.
pub fn dual_set_cluster(coords: &[[f64; 3]], shifted: &[[f64; 3]], sem: &[u32], cfg: &InstanceConfig) -> Vec<Proposal> {
    let mut out = Vec::new();
    for (space, pts) in [(Space::Original, coords), (Space::Shifted, shifted)] {
        for c in cluster_points(pts, sem, &[SILIQUE], cfg.r, cfg.min_cluster_points) {
            out.push(Proposal {
                members: c.members,
                space,
                class: c.class,
                score: 0.0,
            });
        }
    }
    out
}

/// Score logits (`K x 1`) for proposals whose members index rows of `g`.
///
/// Member features go through an MLP to width `C_3`, are joined with the
/// member coordinates centered on the proposal mean, and reduced by a
/// channel-wise max before a final MLP.
pub fn score_logits<T: Real>(ctx: &Ctx<T>, g: Var, coords: &[[f64; 3]], proposals: &[Proposal]) -> Result<Var> {
    let t = ctx.tape;
    let feat = mlp(ctx, "inst.score.feat", g)?;
    let mut rows = Vec::new();
    let mut centered = Vec::new();
    let mut groups = Segments::new();
    for p in proposals {
        let n = p.members.len() as f64;
        let mut mean = [0.0; 3];
        for &m in &p.members {
            for a in 0..3 {
                mean[a] += coords[m][a] / n;
            }
        }
        let start = rows.len();
        for &m in &p.members {
            rows.push(m);
            centered.extend((0..3).map(|a| T::lit(coords[m][a] - mean[a])));
        }
        groups.push(&(start..rows.len()).collect::<Vec<_>>());
    }
    let total = rows.len();
    let gathered = t.gather_rows(feat, Arc::new(rows))?;
    let xyz = t.constant(Tensor::matrix(total, 3, centered)?);
    let joined = t.concat_cols(&[gathered, xyz])?;
    let pooled = t.segment_reduce(joined, Arc::new(groups), podseg_nn::Reduce::Max)?;
    Ok(mlp(ctx, "inst.score.head", pooled)?)
}

/// Soft score target from IoU: 0 below 0.25, 1 above 0.75, linear between.
pub fn iou_ramp(iou: f64) -> f64 {
    ((iou - 0.25) / 0.5).clamp(0.0, 1.0)
}

/// Best IoU of each proposal against the ground-truth instances.
pub fn best_ious(proposals: &[Proposal], inst: &[i32]) -> Vec<f64> {
    let gt = instance_sets(inst);
    proposals
        .iter()
        .map(|p| gt.iter().map(|g| point_iou(&p.members, g)).fold(0.0, f64::max))
        .collect()
}

/// Point sets of each ground-truth instance id, ordered by id.
pub fn instance_sets(inst: &[i32]) -> Vec<Vec<usize>> {
    let mut by_id: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, &id) in inst.iter().enumerate() {
        if id >= 0 {
            by_id.entry(id).or_default().push(i);
        }
    }
    by_id.into_values().collect()
}

pub fn score_targets(proposals: &[Proposal], inst: &[i32]) -> Vec<f64> {
    best_ious(proposals, inst).into_iter().map(iou_ramp).collect()
}

/// Binary cross-entropy between score logits and soft targets.
pub fn score_loss<T: Real>(tape: &Tape<T>, logits: Var, targets: &[f64]) -> Result<Var> {
    let t = Arc::new(targets.iter().map(|v| T::lit(*v)).collect());
    Ok(tape.bce_with_logits(logits, t)?)
}

/// Greedy suppression by descending score (lower index first on ties):
/// a proposal is dropped if its IoU with any kept one exceeds `iou`.
pub fn nms(proposals: &[Proposal], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| point_iou(&proposals[i].members, &proposals[k].members) <= iou)
        {
            kept.push(i);
        }
    }
    kept
}

/// Per-point instance id (`-1` if unassigned) and score. A point claimed by
/// several kept proposals goes to the highest-scoring one.
pub fn assign_instances(n: usize, proposals: &[Proposal], kept: &[usize]) -> (Vec<i32>, Vec<f64>) {
    let mut inst = vec![-1; n];
    let mut score = vec![0.0; n];
    let mut order = kept.to_vec();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    for (id, &k) in order.iter().enumerate() {
        for &m in &proposals[k].members {
            if inst[m] < 0 {
                inst[m] = id as i32;
                score[m] = proposals[k].score;
            }
        }
    }
    (inst, score)
}

/// Losses active at one epoch and the parameter prefixes held fixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub semantic: bool,
    pub offset: bool,
    pub score: bool,
    pub frozen: Vec<&'static str>,
}

impl Schedule {
    pub fn num_losses(&self) -> usize {
        self.semantic as usize + 2 * self.offset as usize + self.score as usize
    }
}

/// Epochs are 1-based. Up to `prep_epoch` the instance variants train the
/// semantic and offset losses; afterwards V adds the score loss and F
/// trains offsets and scores on a frozen backbone.
pub fn train_schedule(variant: Variant, epoch: usize, prep_epoch: usize) -> Schedule {
    let prep = epoch <= prep_epoch;
    match variant {
        Variant::Pst => Schedule {
            semantic: true,
            offset: false,
            score: false,
            frozen: Vec::new(),
        },
        _ if prep => Schedule {
            semantic: true,
            offset: true,
            score: false,
            frozen: Vec::new(),
        },
        Variant::VPstPg => Schedule {
            semantic: true,
            offset: true,
            score: true,
            frozen: Vec::new(),
        },
        Variant::FPstPg => Schedule {
            semantic: false,
            offset: true,
            score: true,
            frozen: BACKBONE_PREFIXES.to_vec(),
        },
    }
}

const SHIFT_HEADER: &str = "# podseg-shift v1 columns=set,x,y,z,sem";

/// Writes the original and shifted coordinates with their labels, one
/// block after the other, for visual inspection of mis-shifted points.
pub fn export_shift_diagnostics(path: &Path, coords: &[[f64; 3]], shifted: &[[f64; 3]], sem: &[u32]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{SHIFT_HEADER}")?;
        for (name, pts) in [("original", coords), ("shifted", shifted)] {
            for (p, s) in pts.iter().zip(sem) {
                writeln!(w, "{name} {:?} {:?} {:?} {s}", p[0], p[1], p[2])?;
            }
        }
        w.flush()
    };
    write().map_err(|e| ModelError::io(path, e))
}

/// Reads a file written by [`export_shift_diagnostics`].
pub fn read_shift_diagnostics(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<u32>)> {
    let f = std::fs::File::open(path).map_err(|e| ModelError::io(path, e))?;
    let (mut orig, mut shifted, mut sem) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| ModelError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a + 1].parse().map_err(|_| bad("bad coordinate"))?;
        }
        let s: u32 = fields[4].parse().map_err(|_| bad("bad label"))?;
        match fields[0] {
            "original" => {
                orig.push(p);
                sem.push(s);
            }
            "shifted" => shifted.push(p),
            _ => return Err(bad("unknown set")),
        }
    }
    Ok((orig, shifted, sem))
}

pub const INSTANCE_HEADER: &str = "# podseg-instances v1 columns=x,y,z,sem,inst_pred,score";

pub fn write_instance_predictions(
    path: &Path,
    coords: &[[f64; 3]],
    sem: &[u32],
    inst: &[i32],
    score: &[f64],
) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{INSTANCE_HEADER}")?;
        for i in 0..coords.len() {
            let p = coords[i];
            writeln!(w, "{:?} {:?} {:?} {} {} {:?}", p[0], p[1], p[2], sem[i], inst[i], score[i])?;
        }
        w.flush()
    };
    write().map_err(|e| ModelError::io(path, e))
}

/// Reads `(sem, inst_pred, score)` columns of an instance prediction file.
pub fn read_instance_predictions(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<u32>, Vec<i32>, Vec<f64>)> {
    let f = std::fs::File::open(path).map_err(|e| ModelError::io(path, e))?;
    let (mut xyz, mut sem, mut inst, mut score) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| ModelError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        xyz.push([num(f[0])?, num(f[1])?, num(f[2])?]);
        sem.push(f[3].parse().map_err(|_| bad("bad label"))?);
        inst.push(f[4].parse().map_err(|_| bad("bad instance id"))?);
        score.push(num(f[5])?);
    }
    Ok((xyz, sem, inst, score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(members: Vec<usize>, score: f64) -> Proposal {
        Proposal {
            members,
            space: Space::Original,
            class: SILIQUE,
            score,
        }
    }

    #[test]
    fn one_dimensional_clusters() {
        let c: Vec<[f64; 3]> = [0.0, 0.5, 3.0].iter().map(|x| [*x, 0.0, 0.0]).collect();
        let got = cluster_points(&c, &[1, 1, 1], &[1], 1.0, 1);
        assert_eq!(got.iter().map(|c| c.members.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![2]]);
        assert_eq!(cluster_points(&c, &[1, 1, 1], &[1], 1.0, 2).len(), 1);
        let mixed = cluster_points(&c, &[1, 0, 1], &[0, 1], 1.0, 1);
        assert_eq!(mixed.len(), 3);
    }

    #[test]
    fn nms_examples() {
        // IoU 8/10 = 0.8
        let a = prop((0..9).collect(), 0.9);
        let b = prop((1..10).collect(), 0.7);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.3), vec![0]);
        let c = prop(vec![20, 21], 0.1);
        assert_eq!(nms(&[a.clone(), c], 0.3), vec![0, 1]);
        let tie = prop((0..9).collect(), 0.9);
        assert_eq!(nms(&[a, tie], 0.3), vec![0]);
    }

    #[test]
    fn ramp_points() {
        assert_eq!(iou_ramp(1.0), 1.0);
        assert_eq!(iou_ramp(0.0), 0.0);
        assert_eq!(iou_ramp(0.5), 0.5);
    }

    #[test]
    fn schedules() {
        assert_eq!(train_schedule(Variant::VPstPg, 8, 8).num_losses(), 3);
        assert_eq!(train_schedule(Variant::VPstPg, 9, 8).num_losses(), 4);
        let f = train_schedule(Variant::FPstPg, 9, 8);
        assert!(!f.semantic && f.score && f.frozen.contains(&"encoder."));
        assert!(train_schedule(Variant::FPstPg, 8, 8).frozen.is_empty());
    }

    #[test]
    fn assignment_prefers_higher_score() {
        let p = vec![prop(vec![0, 1], 0.4), prop(vec![1, 2], 0.8)];
        let (inst, score) = assign_instances(4, &p, &[0, 1]);
        assert_eq!(inst, vec![1, 0, 0, -1]);
        assert_eq!(score, vec![0.4, 0.8, 0.8, 0.0]);
    }
}

//! Semantic and instance segmentation metrics, instance counting and the
//! voxelization class-proportion analysis.

use std::fmt::Write as _;

use crate::cloud::{LabeledCloud, SILIQUE};
use crate::error::{CoreError, Result};
use crate::voxel::{dynamic_voxelize, VoxelGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScores {
    /// Scores from confusion counts. A class absent from both prediction and
    /// ground truth scores 1 everywhere; any other zero denominator gives 0.
    pub fn from_counts(c: ClassCounts) -> Self {
        if c.tp + c.fp + c.fn_ == 0 {
            return Self {
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Self {
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Unweighted mean over classes.
pub fn class_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticReport {
    pub counts: Vec<ClassCounts>,
    pub per_class: Vec<ClassScores>,
    pub mean: ClassScores,
    pub overall_accuracy: f64,
}

pub fn semantic_metrics(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<SemanticReport> {
    if pred.is_empty() {
        return Err(CoreError::Empty("no predictions to score"));
    }
    if pred.len() != gt.len() {
        return Err(CoreError::Shape(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= num_classes) {
        return Err(CoreError::Labels(format!(
            "class {bad} outside 0..{num_classes}"
        )));
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    let mut correct = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            counts[p as usize].tp += 1;
            correct += 1;
        } else {
            counts[p as usize].fp += 1;
            counts[g as usize].fn_ += 1;
        }
    }
    let per_class: Vec<ClassScores> = counts.iter().map(|&c| ClassScores::from_counts(c)).collect();
    let pick = |f: fn(&ClassScores) -> f64| class_mean(&per_class.iter().map(f).collect::<Vec<_>>());
    let mean = ClassScores {
        iou: pick(|s| s.iou),
        precision: pick(|s| s.precision),
        recall: pick(|s| s.recall),
        f1: pick(|s| s.f1),
    };
    Ok(SemanticReport {
        counts,
        per_class,
        mean,
        overall_accuracy: correct as f64 / pred.len() as f64,
    })
}

impl SemanticReport {
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("class,iou,precision,recall,f1,oacc\n");
        for (k, c) in self.per_class.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("class");
            let _ = writeln!(s, "{name},{},{},{},{},", c.iou, c.precision, c.recall, c.f1);
        }
        let m = &self.mean;
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{}",
            m.iou, m.precision, m.recall, m.f1, self.overall_accuracy
        );
        s
    }

    pub fn to_table(&self, class_names: &[&str]) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "class", "IoU%", "Prec%", "Rec%", "F1%", "oAcc%"
        );
        let row = |s: &mut String, name: &str, c: &ClassScores, oacc: Option<f64>| {
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8}",
                name,
                100.0 * c.iou,
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1,
                oacc.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()
            );
        };
        for (k, c) in self.per_class.iter().enumerate() {
            row(&mut s, class_names.get(k).copied().unwrap_or("class"), c, None);
        }
        row(&mut s, "mean", &self.mean, Some(self.overall_accuracy));
        s
    }
}

/// Intersection over union of two sorted, duplicate-free index lists.
pub fn point_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn best_ious(from: &[Vec<usize>], to: &[Vec<usize>]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| point_iou(a, b)).fold(0.0, f64::max))
        .collect()
}

/// How predictions are paired with ground truth when counting true positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Matching {
    /// Every prediction is compared with its best ground-truth instance.
    #[default]
    BestMatch,
    /// Greedy one-to-one pairing by descending IoU.
    OneToOne,
}

pub const INSTANCE_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceReport {
    pub mcov: f64,
    pub mwcov: f64,
    pub thresholds: Vec<f64>,
    pub mprec: Vec<f64>,
    pub mrec: Vec<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Predictions counted as true positives at each threshold.
    pub detected: Vec<usize>,
    /// Size weight of each ground-truth instance; sums to 1.
    pub weights: Vec<f64>,
}

/// Instance metrics over point-index sets. Index lists are sorted internally.
pub fn instance_metrics(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    thresholds: &[f64],
    matching: Matching,
) -> Result<InstanceReport> {
    if gt.is_empty() {
        return Err(CoreError::Empty("no ground-truth instances"));
    }
    let sorted = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
        sets.iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect()
    };
    let pred = sorted(pred);
    let gt = sorted(gt);

    let gt_best = best_ious(&gt, &pred);
    let total: usize = gt.iter().map(Vec::len).sum();
    let weights: Vec<f64> = gt.iter().map(|g| g.len() as f64 / total as f64).collect();
    let mcov = class_mean(&gt_best);
    let mwcov = weights.iter().zip(&gt_best).map(|(w, c)| w * c).sum();

    let mut mprec = Vec::new();
    let mut mrec = Vec::new();
    let mut detected = Vec::new();
    for &theta in thresholds {
        let (tp_pred, tp_gt) = match matching {
            Matching::BestMatch => (
                count_detected(&pred, &gt, theta),
                gt_best.iter().filter(|&&v| v > theta).count(),
            ),
            Matching::OneToOne => {
                let n = one_to_one_matches(&pred, &gt, theta);
                (n, n)
            }
        };
        detected.push(tp_pred);
        mprec.push(if pred.is_empty() {
            0.0
        } else {
            tp_pred as f64 / pred.len() as f64
        });
        mrec.push(tp_gt as f64 / gt.len() as f64);
    }
    Ok(InstanceReport {
        mcov,
        mwcov,
        thresholds: thresholds.to_vec(),
        mprec,
        mrec,
        num_gt: gt.len(),
        num_pred: pred.len(),
        detected,
        weights,
    })
}

fn one_to_one_matches(pred: &[Vec<usize>], gt: &[Vec<usize>], theta: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = point_iou(p, g);
            if iou > theta {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut n = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            n += 1;
        }
    }
    n
}

/// Number of predictions whose best IoU with any ground-truth instance is
/// strictly above `theta`. Index lists must be sorted.
pub fn count_detected(pred: &[Vec<usize>], gt: &[Vec<usize>], theta: f64) -> usize {
    best_ious(pred, gt).into_iter().filter(|&v| v > theta).count()
}

/// Root-mean-square error between per-sample counts.
pub fn rmse(counts: &[usize], gt_counts: &[usize]) -> Result<f64> {
    if counts.len() != gt_counts.len() {
        return Err(CoreError::Shape(format!(
            "{} counts for {} ground-truth counts",
            counts.len(),
            gt_counts.len()
        )));
    }
    if counts.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = counts
        .iter()
        .zip(gt_counts)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((sq / counts.len() as f64).sqrt())
}

impl InstanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mcov,{}", self.mcov);
        let _ = writeln!(s, "mwcov,{}", self.mwcov);
        for (k, t) in self.thresholds.iter().enumerate() {
            let pct = (t * 100.0).round() as u32;
            let _ = writeln!(s, "mprec{pct},{}", self.mprec[k]);
            let _ = writeln!(s, "mrec{pct},{}", self.mrec[k]);
        }
        let _ = writeln!(s, "num_gt,{}", self.num_gt);
        let _ = writeln!(s, "num_pred,{}", self.num_pred);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>8}\n", "metric", "%");
        let _ = writeln!(s, "{:<10} {:>8.2}", "mCov", 100.0 * self.mcov);
        let _ = writeln!(s, "{:<10} {:>8.2}", "mWCov", 100.0 * self.mwcov);
        for (k, t) in self.thresholds.iter().enumerate() {
            let pct = (t * 100.0).round() as u32;
            let _ = writeln!(s, "{:<10} {:>8.2}", format!("mPrec{pct}"), 100.0 * self.mprec[k]);
            let _ = writeln!(s, "{:<10} {:>8.2}", format!("mRec{pct}"), 100.0 * self.mrec[k]);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProportions {
    /// Fraction of points in each class.
    pub before: Vec<f64>,
    /// Fraction of occupied voxels whose majority label is each class.
    pub after: Vec<f64>,
    pub num_voxels: usize,
}

impl ClassProportions {
    /// L1 distance between point-level and voxel-level proportions.
    pub fn l1_shift(&self) -> f64 {
        self.before
            .iter()
            .zip(&self.after)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Majority label of a voxel; ties resolve to silique when it is among the
/// tied classes, otherwise to the lowest class id.
pub fn majority_label(labels: impl IntoIterator<Item = u32>, num_classes: usize) -> u32 {
    let mut hist = vec![0usize; num_classes];
    for l in labels {
        hist[l as usize] += 1;
    }
    let best = hist.iter().copied().max().unwrap_or(0);
    if (SILIQUE as usize) < num_classes && hist[SILIQUE as usize] == best {
        return SILIQUE;
    }
    hist.iter().position(|&h| h == best).unwrap_or(0) as u32
}

pub fn voxel_class_proportions(
    cloud: &LabeledCloud,
    grid: &VoxelGrid,
    num_classes: usize,
) -> Result<ClassProportions> {
    let sem = cloud
        .sem
        .as_ref()
        .ok_or_else(|| CoreError::Labels("cloud has no semantic labels".into()))?;
    if cloud.is_empty() {
        return Err(CoreError::Empty("cloud has no points"));
    }
    cloud.validate(num_classes)?;
    let map = dynamic_voxelize(cloud, grid)?;
    let mut before = vec![0.0; num_classes];
    for &s in sem {
        before[s as usize] += 1.0;
    }
    before.iter_mut().for_each(|v| *v /= sem.len() as f64);
    let mut after = vec![0.0; num_classes];
    for members in &map.voxel_to_points {
        let label = majority_label(members.iter().map(|&i| sem[i]), num_classes);
        after[label as usize] += 1.0;
    }
    after
        .iter_mut()
        .for_each(|v| *v /= map.num_voxels() as f64);
    Ok(ClassProportions {
        before,
        after,
        num_voxels: map.num_voxels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::NON_SILIQUE;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_from_counts() {
        let s = ClassScores::from_counts(ClassCounts { tp: 8, fp: 1, fn_: 1 });
        assert_abs_diff_eq!(s.iou, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(s.precision, 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn published_table_arithmetic() {
        assert_abs_diff_eq!(f1_score(96.43, 98.89), 97.65, epsilon = 0.01);
        assert_abs_diff_eq!(class_mean(&[95.40, 92.51]), 93.96, epsilon = 0.01);
    }

    #[test]
    fn perfect_prediction() {
        let labels = [0, 1, 1, 0, 1];
        let r = semantic_metrics(&labels, &labels, 2).unwrap();
        assert_eq!(r.mean.iou, 1.0);
        assert_eq!(r.overall_accuracy, 1.0);
    }

    #[test]
    fn semantic_errors() {
        assert!(semantic_metrics(&[], &[], 2).is_err());
        assert!(semantic_metrics(&[0], &[0, 1], 2).is_err());
        assert!(semantic_metrics(&[3], &[0], 2).is_err());
    }

    #[test]
    fn coverage_examples() {
        // gt 0: 10 points, best overlap 9/10; gt 1: 30 points, best 21/30.
        let gt = vec![(0..10).collect::<Vec<_>>(), (10..40).collect()];
        let pred = vec![(0..9).collect::<Vec<_>>(), (10..31).collect()];
        let r = instance_metrics(&pred, &gt, &INSTANCE_THRESHOLDS, Matching::BestMatch).unwrap();
        assert_abs_diff_eq!(r.mcov, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mwcov, 0.25 * 0.9 + 0.75 * 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(r.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn precision_at_half() {
        let gt = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let pred = vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![8, 9]];
        let r = instance_metrics(&pred, &gt, &[0.5], Matching::BestMatch).unwrap();
        assert_abs_diff_eq!(r.mprec[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mrec[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(instance_metrics(&[vec![1]], &[], &[0.5], Matching::BestMatch).is_err());
    }

    #[test]
    fn one_to_one_does_not_double_count() {
        let gt = vec![(0..10).collect::<Vec<_>>()];
        let pred = vec![(0..10).collect::<Vec<_>>(), (0..9).collect()];
        let best = instance_metrics(&pred, &gt, &[0.5], Matching::BestMatch).unwrap();
        let one = instance_metrics(&pred, &gt, &[0.5], Matching::OneToOne).unwrap();
        assert_eq!(best.detected[0], 2);
        assert_eq!(one.detected[0], 1);
        assert_abs_diff_eq!(one.mprec[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn counting_and_rmse() {
        let gt = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
        let pred = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7]];
        assert_eq!(count_detected(&pred, &gt, 0.9), 2);
        assert_eq!(rmse(&[5, 7], &[5, 7]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[10, 12], &[10, 10]).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn majority_vote() {
        assert_eq!(majority_label([SILIQUE, SILIQUE, NON_SILIQUE], 2), SILIQUE);
        assert_eq!(majority_label([SILIQUE, NON_SILIQUE], 2), SILIQUE);
        assert_eq!(majority_label([NON_SILIQUE, NON_SILIQUE, SILIQUE], 2), NON_SILIQUE);
    }

    #[test]
    fn singleton_voxels_keep_proportions() {
        let cloud = LabeledCloud::new("t", vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]])
            .with_sem(vec![SILIQUE, NON_SILIQUE, NON_SILIQUE]);
        let grid = VoxelGrid::new([0.0; 3], [1.0; 3], [3, 1, 1]).unwrap();
        let p = voxel_class_proportions(&cloud, &grid, 2).unwrap();
        assert_eq!(p.before, p.after);
        assert_eq!(p.l1_shift(), 0.0);
    }

    proptest! {
        #[test]
        fn semantic_invariants(pairs in prop::collection::vec((0u32..2, 0u32..2), 1..200)) {
            let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
            let gt: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            let r = semantic_metrics(&pred, &gt, 2).unwrap();
            let agree = pred.iter().zip(&gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
            prop_assert_eq!(r.overall_accuracy, agree);
            for s in &r.per_class {
                for v in [s.iou, s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if s.precision + s.recall > 0.0 {
                    prop_assert!((s.f1 - 2.0 * s.precision * s.recall / (s.precision + s.recall)).abs() < 1e-12);
                }
                prop_assert!(s.iou <= s.precision.min(s.recall) + 1e-12);
                prop_assert!(s.precision.min(s.recall) <= s.f1 + 1e-12);
            }
        }

        #[test]
        fn precision_recall_monotone_in_threshold(
            gt_sizes in prop::collection::vec(1usize..15, 1..8),
            cuts in prop::collection::vec((0usize..15, 0usize..15), 0..10),
        ) {
            let mut gt = Vec::new();
            let mut start = 0;
            for s in gt_sizes {
                gt.push((start..start + s).collect::<Vec<_>>());
                start += s;
            }
            let pred: Vec<Vec<usize>> = cuts
                .iter()
                .map(|&(a, b)| (a.min(b)..=a.max(b)).map(|v| v * start / 15).collect::<Vec<_>>())
                .map(|mut v: Vec<usize>| { v.dedup(); v })
                .collect();
            let r = instance_metrics(&pred, &gt, &INSTANCE_THRESHOLDS, Matching::BestMatch).unwrap();
            for k in 1..r.thresholds.len() {
                prop_assert!(r.mprec[k] <= r.mprec[k - 1]);
                prop_assert!(r.mrec[k] <= r.mrec[k - 1]);
            }
            prop_assert!((0.0..=1.0).contains(&r.mcov));
            prop_assert!(r.mwcov <= 1.0 + 1e-12);
        }
    }
}

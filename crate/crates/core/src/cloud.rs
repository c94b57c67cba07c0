use crate::error::{CoreError, Result};

/// Semantic id of stems, tillers and every other organ that is not a pod.
pub const NON_SILIQUE: u32 = 0;
/// Semantic id of the seed pods, the only class that carries instances.
pub const SILIQUE: u32 = 1;
/// Instance id of points that belong to no instance.
pub const NO_INSTANCE: i32 = -1;

/// A point cloud with optional per-point semantic and instance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub id: String,
    pub coords: Vec<[f64; 3]>,
    pub sem: Option<Vec<u32>>,
    pub inst: Option<Vec<i32>>,
}

impl LabeledCloud {
    pub fn new(id: impl Into<String>, coords: Vec<[f64; 3]>) -> Self {
        Self {
            id: id.into(),
            coords,
            sem: None,
            inst: None,
        }
    }

    pub fn with_sem(mut self, sem: Vec<u32>) -> Self {
        self.sem = Some(sem);
        self
    }

    pub fn with_inst(mut self, inst: Vec<i32>) -> Self {
        self.inst = Some(inst);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Checks finiteness, label lengths, class range and that instances only
    /// appear on silique points.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(i) = self
            .coords
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(CoreError::NonFinite { index: i });
        }
        if let Some(sem) = &self.sem {
            if sem.len() != self.len() {
                return Err(CoreError::Labels(format!(
                    "{} semantic labels for {} points",
                    sem.len(),
                    self.len()
                )));
            }
            if let Some(i) = sem.iter().position(|&s| s as usize >= num_classes) {
                return Err(CoreError::Labels(format!(
                    "point {i} has class {} >= {num_classes}",
                    sem[i]
                )));
            }
        }
        if let Some(inst) = &self.inst {
            if inst.len() != self.len() {
                return Err(CoreError::Labels(format!(
                    "{} instance labels for {} points",
                    inst.len(),
                    self.len()
                )));
            }
            if let Some(i) = inst.iter().position(|&k| k < NO_INSTANCE) {
                return Err(CoreError::Labels(format!(
                    "point {i} has instance id {}",
                    inst[i]
                )));
            }
            if let Some(sem) = &self.sem {
                if let Some(i) =
                    (0..self.len()).find(|&i| sem[i] != SILIQUE && inst[i] != NO_INSTANCE)
                {
                    return Err(CoreError::Labels(format!(
                        "non-silique point {i} carries instance {}",
                        inst[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        bounds(&self.coords)
    }

    /// Sub-cloud made of the given point indices, labels included.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> LabeledCloud {
        LabeledCloud {
            id: id.into(),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            sem: self
                .sem
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            inst: self
                .inst
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Ground-truth instances as sorted point-index lists, ordered by id.
    pub fn instances(&self) -> Vec<(i32, Vec<usize>)> {
        let Some(inst) = &self.inst else {
            return Vec::new();
        };
        let mut map = std::collections::BTreeMap::<i32, Vec<usize>>::new();
        for (i, &k) in inst.iter().enumerate() {
            if k != NO_INSTANCE {
                map.entry(k).or_default().push(i);
            }
        }
        map.into_iter().collect()
    }

    /// Per-point centroid of the point's ground-truth instance; `None` for
    /// points without an instance.
    pub fn instance_centroids(&self) -> Vec<Option<[f64; 3]>> {
        let mut out = vec![None; self.len()];
        for (_, members) in self.instances() {
            let c = mean_of(members.iter().map(|&i| self.coords[i]));
            for &i in &members {
                out[i] = Some(c);
            }
        }
        out
    }
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

pub(crate) fn mean_of(points: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        for a in 0..3 {
            acc[a] += p[a];
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut acc {
            *v /= n as f64;
        }
    }
    acc
}

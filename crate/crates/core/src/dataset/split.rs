use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Train/validation/test in 40:9:6 proportion, in id order.
    Fixed,
    /// Six near-equal folds of a seeded shuffle.
    SixFold,
}

impl std::str::FromStr for SplitMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "sixfold" => Ok(Self::SixFold),
            other => Err(CoreError::Spec(format!("unknown split mode `{other}`"))),
        }
    }
}

/// Partition of sample ids. Index lists refer to positions in `ids`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSplit {
    Fixed {
        ids: Vec<String>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    SixFold {
        ids: Vec<String>,
        folds: Vec<Vec<usize>>,
    },
}

impl DatasetSplit {
    pub fn ids(&self) -> &[String] {
        match self {
            Self::Fixed { ids, .. } | Self::SixFold { ids, .. } => ids,
        }
    }

    /// Named index lists in a fixed order.
    pub fn parts(&self) -> Vec<(String, &[usize])> {
        match self {
            Self::Fixed {
                train, val, test, ..
            } => vec![
                ("train".into(), train.as_slice()),
                ("val".into(), val.as_slice()),
                ("test".into(), test.as_slice()),
            ],
            Self::SixFold { folds, .. } => folds
                .iter()
                .enumerate()
                .map(|(k, f)| (format!("fold{k}"), f.as_slice()))
                .collect(),
        }
    }

    /// Ids of one named part.
    pub fn part_ids(&self, name: &str) -> Option<Vec<&str>> {
        let ids = self.ids();
        self.parts()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, idx)| idx.iter().map(|&i| ids[i].as_str()).collect())
    }
}

pub fn make_splits(ids: &[String], mode: SplitMode, seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    match mode {
        SplitMode::Fixed => {
            if n < 3 {
                return Err(CoreError::Spec(format!(
                    "fixed split needs at least 3 samples, got {n}"
                )));
            }
            let mut n_train = ((n * 40) as f64 / 55.0).round() as usize;
            let mut n_val = ((n * 9) as f64 / 55.0).round() as usize;
            n_train = n_train.clamp(1, n - 2);
            n_val = n_val.clamp(1, n - n_train - 1);
            Ok(DatasetSplit::Fixed {
                ids: ids.to_vec(),
                train: (0..n_train).collect(),
                val: (n_train..n_train + n_val).collect(),
                test: (n_train + n_val..n).collect(),
            })
        }
        SplitMode::SixFold => {
            if n < 6 {
                return Err(CoreError::Spec(format!(
                    "six-fold split needs at least 6 samples, got {n}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut folds = vec![Vec::new(); 6];
            for (k, i) in order.into_iter().enumerate() {
                folds[k % 6].push(i);
            }
            folds.iter_mut().for_each(|f| f.sort_unstable());
            Ok(DatasetSplit::SixFold {
                ids: ids.to_vec(),
                folds,
            })
        }
    }
}

const MANIFEST_MAGIC: &str = "# podseg-manifest v1";

/// Writes `id part` lines after a header naming the mode.
pub fn write_manifest(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let mode = match split {
        DatasetSplit::Fixed { .. } => "fixed",
        DatasetSplit::SixFold { .. } => "sixfold",
    };
    let mut s = format!("{MANIFEST_MAGIC} mode={mode}\n");
    let ids = split.ids();
    for (name, idx) in split.parts() {
        for &i in idx {
            let _ = writeln!(s, "{} {name}", ids[i]);
        }
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

/// Reads a manifest back as `(id, part)` pairs in file order.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(id), Some(part), None) => out.push((id.to_string(), part.to_string())),
            _ => {
                return Err(CoreError::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: "expected `id part`".into(),
                })
            }
        }
    }
    Ok(out)
}

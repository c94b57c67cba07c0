//! Flat `key = value` run configuration covering every tunable default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use podseg_core::dataset::{PlantSpec, SplitMode};
use podseg_core::metrics::Matching;
use podseg_core::{AggregateMode, VoxelReference};
use podseg_model::{ModelConfig, PatchSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub patch: PatchSpec,
    pub train: TrainConfig,
    /// Number of plants written by `synth`.
    pub n: usize,
    pub split: SplitMode,
    /// Six-fold mode: the fold held out for validation.
    pub fold: usize,
    pub plant: PlantSpec,
    pub matching: Matching,
    /// Epochs per augmented-feature row of the ablation.
    pub ablate_epochs: usize,
    /// Plants compared in the voxel-shape analysis.
    pub ablate_seeds: usize,
    /// Synthetic plants used by the feature ablation when no dataset is given.
    pub ablate_plants: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            patch: PatchSpec::default(),
            train: TrainConfig::default(),
            n: 12,
            split: SplitMode::Fixed,
            fold: 0,
            plant: PlantSpec::default(),
            matching: Matching::BestMatch,
            ablate_epochs: 20,
            ablate_seeds: 10,
            ablate_plants: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let l = parse_list::<T>(key, v)?;
    l.try_into()
        .map_err(|_| anyhow!("config key `{key}`: expected three comma-separated values, got `{v}`"))
}

fn parse_range<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    match parse_list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => bail!("config key `{key}`: expected `min,max`, got `{v}`"),
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split_name(m: SplitMode) -> &'static str {
    match m {
        SplitMode::Fixed => "fixed",
        SplitMode::SixFold => "sixfold",
    }
}

fn aggregate_name(m: AggregateMode) -> &'static str {
    match m {
        AggregateMode::Max => "max",
        AggregateMode::Mean => "mean",
        AggregateMode::Sum => "sum",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.plant;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
            }
            "n" => self.n = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "matching" => {
                self.matching = match v {
                    "best" => Matching::BestMatch,
                    "one-to-one" => Matching::OneToOne,
                    _ => bail!("config key `matching`: expected `best` or `one-to-one`, got `{v}`"),
                }
            }
            "voxel_size" => m.voxel_size = parse_triple(key, v)?,
            "window" => m.window = parse_triple(key, v)?,
            "aggregate" => m.aggregate = parse(key, v)?,
            "c_mid" => m.c_mid = parse(key, v)?,
            "c1" => m.c1 = parse(key, v)?,
            "c2" => m.c2 = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "num_blocks" => m.num_blocks = parse(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, v)?,
            "shift" => m.shift = parse(key, v)?,
            "point_width" => m.point_width = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "standardize" => m.standardize = parse(key, v)?,
            "use_cluster_centroid" => m.flags.use_cluster_centroid = parse(key, v)?,
            "use_voxel_center" => m.flags.use_voxel_center = parse(key, v)?,
            "use_l2_norm" => m.flags.use_l2_norm = parse(key, v)?,
            "voxel_reference" => {
                m.flags.voxel_reference = match v {
                    "center" => VoxelReference::Center,
                    "index" => VoxelReference::Index,
                    _ => bail!("config key `voxel_reference`: expected `center` or `index`, got `{v}`"),
                }
            }
            "r" => m.instance.r = parse(key, v)?,
            "min_cluster_points" => m.instance.min_cluster_points = parse(key, v)?,
            "nms_iou" => m.instance.nms_iou = parse(key, v)?,
            "prep_epoch" => m.instance.prep_epoch = parse(key, v)?,
            "c3" => m.instance.c3 = parse(key, v)?,
            "offset_hidden" => m.instance.offset_hidden = parse(key, v)?,
            "score_hidden" => m.instance.score_hidden = parse(key, v)?,
            "patch_len" => self.patch.patch_len = parse(key, v)?,
            "patch_offsets" => self.patch.offsets = parse_list(key, v)?,
            "stride" => self.patch.stride = parse(key, v)?,
            "min_patch_points" => self.patch.min_patch_points = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "max_lr" => t.max_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "cycle_len" => t.cycle_len = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "variant" => t.variant = parse(key, v)?,
            "augment" => t.augment = parse(key, v)?,
            "n_tillers" => p.n_tillers = parse(key, v)?,
            "siliques_per_tiller" => p.siliques_per_tiller = parse_range(key, v)?,
            "stem_siliques" => p.stem_siliques = parse_range(key, v)?,
            "silique_length" => p.silique_length = parse_range(key, v)?,
            "silique_radius" => p.silique_radius = parse_range(key, v)?,
            "stem_radius" => p.stem_radius = parse(key, v)?,
            "tiller_radius" => p.tiller_radius = parse(key, v)?,
            "stem_height" => p.stem_height = parse(key, v)?,
            "tiller_length" => p.tiller_length = parse_range(key, v)?,
            "density" => p.density = parse(key, v)?,
            "jitter" => p.jitter = parse(key, v)?,
            "min_gap" => p.min_gap = parse(key, v)?,
            "ablate_epochs" => self.ablate_epochs = parse(key, v)?,
            "ablate_seeds" => self.ablate_seeds = parse(key, v)?,
            "ablate_plants" => self.ablate_plants = parse(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let p = &self.plant;
        let pair = |r: (f64, f64)| format!("{:?},{:?}", r.0, r.1);
        vec![
            ("seed", self.seed.to_string()),
            ("n", self.n.to_string()),
            ("split", split_name(self.split).into()),
            ("fold", self.fold.to_string()),
            (
                "matching",
                match self.matching {
                    Matching::BestMatch => "best",
                    Matching::OneToOne => "one-to-one",
                }
                .into(),
            ),
            ("voxel_size", join(&m.voxel_size)),
            ("window", join(&m.window)),
            ("aggregate", aggregate_name(m.aggregate).into()),
            ("c_mid", m.c_mid.to_string()),
            ("c1", m.c1.to_string()),
            ("c2", m.c2.to_string()),
            ("heads", m.heads.to_string()),
            ("num_blocks", m.num_blocks.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("shift", m.shift.to_string()),
            ("point_width", m.point_width.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("standardize", m.standardize.to_string()),
            ("use_cluster_centroid", m.flags.use_cluster_centroid.to_string()),
            ("use_voxel_center", m.flags.use_voxel_center.to_string()),
            ("use_l2_norm", m.flags.use_l2_norm.to_string()),
            (
                "voxel_reference",
                match m.flags.voxel_reference {
                    VoxelReference::Center => "center",
                    VoxelReference::Index => "index",
                }
                .into(),
            ),
            ("r", format!("{:?}", m.instance.r)),
            ("min_cluster_points", m.instance.min_cluster_points.to_string()),
            ("nms_iou", format!("{:?}", m.instance.nms_iou)),
            ("prep_epoch", m.instance.prep_epoch.to_string()),
            ("c3", m.instance.c3.to_string()),
            ("offset_hidden", m.instance.offset_hidden.to_string()),
            ("score_hidden", m.instance.score_hidden.to_string()),
            ("patch_len", format!("{:?}", self.patch.patch_len)),
            ("patch_offsets", join(&self.patch.offsets)),
            ("stride", format!("{:?}", self.patch.stride)),
            ("min_patch_points", self.patch.min_patch_points.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("base_lr", format!("{:?}", t.base_lr)),
            ("max_lr", format!("{:?}", t.max_lr)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("cycle_len", t.cycle_len.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("variant", t.variant.to_string()),
            ("augment", t.augment.to_string()),
            ("n_tillers", p.n_tillers.to_string()),
            (
                "siliques_per_tiller",
                format!("{},{}", p.siliques_per_tiller.0, p.siliques_per_tiller.1),
            ),
            ("stem_siliques", format!("{},{}", p.stem_siliques.0, p.stem_siliques.1)),
            ("silique_length", pair(p.silique_length)),
            ("silique_radius", pair(p.silique_radius)),
            ("stem_radius", format!("{:?}", p.stem_radius)),
            ("tiller_radius", format!("{:?}", p.tiller_radius)),
            ("stem_height", format!("{:?}", p.stem_height)),
            ("tiller_length", pair(p.tiller_length)),
            ("density", format!("{:?}", p.density)),
            ("jitter", format!("{:?}", p.jitter)),
            ("min_gap", format!("{:?}", p.min_gap)),
            ("ablate_epochs", self.ablate_epochs.to_string()),
            ("ablate_seeds", self.ablate_seeds.to_string()),
            ("ablate_plants", self.ablate_plants.to_string()),
        ]
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", k + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{origin}:{}", k + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// The effective configuration as a file `load` reads back unchanged.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.patch.validate()?;
        self.train.validate()?;
        self.plant.validate()?;
        if self.fold >= 6 {
            bail!("fold must be below 6, got {}", self.fold);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("voxel_size", "0.0045, 0.0045, 0.0045").unwrap();
        c.set("variant", "f-pst-pg").unwrap();
        c.set("silique_length", "0.03,0.05").unwrap();
        c.set("max_lr", "0.002").unwrap();
        let back = RunConfig::parse_str(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().render(), "d").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse_str("epochs = 3\nbogus = 1\n", "f").unwrap_err();
        assert!(format!("{e:#}").contains("unknown config key `bogus`"), "{e:#}");
        assert!(RunConfig::parse_str("window = 6,6", "f").is_err());
        assert!(RunConfig::parse_str("epochs 3", "f").is_err());
        let c = RunConfig::parse_str("# comment\nepochs = 7 # trailing\n", "f").unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.set("c2", "64").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("stride", "0.5").unwrap();
        assert!(c.validate().is_err());
    }
}

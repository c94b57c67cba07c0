use std::fmt;
use std::str::FromStr;

use podseg_core::{AggregateMode, AugmentFlags};

use crate::error::{ModelError, Result};

/// Which way the second window set is displaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShiftConvention {
    /// Add half a window to voxel coordinates before flooring.
    #[default]
    AddHalf,
    /// Subtract half a window before flooring.
    SubtractHalf,
}

impl FromStr for ShiftConvention {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "add-half" => Ok(Self::AddHalf),
            "subtract" | "subtract-half" => Ok(Self::SubtractHalf),
            _ => Err(ModelError::Config(format!("unknown shift convention `{s}`"))),
        }
    }
}

impl fmt::Display for ShiftConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AddHalf => "add-half",
            Self::SubtractHalf => "subtract-half",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceConfig {
    /// Clustering radius in normalized space.
    pub r: f64,
    pub min_cluster_points: usize,
    pub nms_iou: f64,
    /// Last epoch (1-based) of the preparation stage.
    pub prep_epoch: usize,
    /// ScoreNet feature width.
    pub c3: usize,
    pub offset_hidden: usize,
    pub score_hidden: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            min_cluster_points: 10,
            nms_iou: 0.3,
            prep_epoch: 8,
            c3: 32,
            offset_hidden: 32,
            score_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub flags: AugmentFlags,
    /// Voxel edge lengths (x, y, z) in normalized space.
    pub voxel_size: [f64; 3],
    pub aggregate: AggregateMode,
    pub c_mid: usize,
    /// Voxel encoder output width.
    pub c1: usize,
    /// Transformer width.
    pub c2: usize,
    pub heads: usize,
    /// Window size in voxels (x, y, z).
    pub window: [usize; 3],
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub shift: ShiftConvention,
    /// Width of the per-point MLP concatenated to propagated voxel features.
    pub point_width: usize,
    pub num_classes: usize,
    /// Rescale input features to unit-order magnitudes before the encoder.
    pub standardize: bool,
    pub instance: InstanceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flags: AugmentFlags::default(),
            voxel_size: [0.006, 0.006, 0.0025],
            aggregate: AggregateMode::Max,
            c_mid: 32,
            c1: 64,
            c2: 60,
            heads: 4,
            window: [6, 6, 12],
            num_blocks: 6,
            mlp_hidden: 120,
            shift: ShiftConvention::AddHalf,
            point_width: 16,
            num_classes: 2,
            standardize: true,
            instance: InstanceConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        self.flags.channels()
    }

    pub fn window_volume(&self) -> usize {
        self.window.iter().product()
    }

    /// Width of the dense per-point feature G.
    pub fn point_feature_width(&self) -> usize {
        self.c2 + self.point_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.voxel_size.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("voxel_size {:?} must be positive", self.voxel_size));
        }
        if self.window.contains(&0) {
            return bad(format!("window {:?} must be positive", self.window));
        }
        for (name, v) in [
            ("c_mid", self.c_mid),
            ("c1", self.c1),
            ("c2", self.c2),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("point_width", self.point_width),
            ("instance.c3", self.instance.c3),
            ("instance.offset_hidden", self.instance.offset_hidden),
            ("instance.score_hidden", self.instance.score_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.c2 % self.heads != 0 {
            return bad(format!("c2={} is not divisible by heads={}", self.c2, self.heads));
        }
        if self.c2 % 6 != 0 {
            return bad(format!("c2={} must be divisible by 6 for the position encoding", self.c2));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        let i = &self.instance;
        if !(i.r > 0.0) {
            return bad("instance.r must be positive".into());
        }
        if !(i.nms_iou > 0.0 && i.nms_iou < 1.0) {
            return bad("instance.nms_iou must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Patch cropping and sliding-inference geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub patch_len: f64,
    /// Tiling offsets used to draw training patches.
    pub offsets: Vec<f64>,
    /// Step between inference tilings.
    pub stride: f64,
    /// Training patches smaller than this are merged into a neighbor.
    pub min_patch_points: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_len: 0.16,
            offsets: vec![0.0, 0.08],
            stride: 0.08,
            min_patch_points: 5,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_len > 0.0 && self.stride > 0.0 && self.stride <= self.patch_len) {
            return Err(ModelError::Config(format!(
                "need 0 < stride ({}) <= patch_len ({})",
                self.stride, self.patch_len
            )));
        }
        if self.offsets.is_empty() || self.offsets.iter().any(|o| !o.is_finite()) {
            return Err(ModelError::Config("patch offsets must be finite and nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Semantic segmentation only.
    #[default]
    Pst,
    /// Instance head trained jointly with a trainable backbone.
    VPstPg,
    /// Instance head trained on a backbone frozen after preparation.
    FPstPg,
}

impl Variant {
    pub fn has_instance_head(self) -> bool {
        self != Self::Pst
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pst" => Ok(Self::Pst),
            "v-pst-pg" | "v" => Ok(Self::VPstPg),
            "f-pst-pg" | "f" => Ok(Self::FPstPg),
            _ => Err(ModelError::Config(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pst => "pst",
            Self::VPstPg => "v-pst-pg",
            Self::FPstPg => "f-pst-pg",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Steps per learning-rate cycle; 0 spans the whole run with one cycle.
    pub cycle_len: u64,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    pub variant: Variant,
    /// Re-voxelize each training patch every epoch after a random rotation
    /// about the vertical axis and a random mirror flip.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            seed: 0,
            base_lr: 1e-5,
            max_lr: 1e-3,
            weight_decay: 0.05,
            cycle_len: 0,
            eval_every: 2,
            variant: Variant::Pst,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(ModelError::Config("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.max_lr >= self.base_lr) {
            return Err(ModelError::Config("need 0 < base_lr <= max_lr".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

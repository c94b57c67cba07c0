//! Two stacked voxel feature encoding layers over a dynamic voxel map.

use std::sync::Arc;

use podseg_core::AggregateMode;
use podseg_nn::{fcn, Ctx, ParamInit, Real, Reduce, Segments, Var};

use crate::config::ModelConfig;
use crate::error::Result;

pub(crate) fn reduce_mode(mode: AggregateMode) -> Reduce {
    match mode {
        AggregateMode::Max => Reduce::Max,
        AggregateMode::Mean => Reduce::Mean,
        AggregateMode::Sum => Reduce::Sum,
    }
}

pub fn init_dvfe<T: Real>(init: &mut ParamInit<T>, cfg: &ModelConfig) -> Result<()> {
    let c0 = cfg.in_channels();
    init.fcn("dvfe.vfe1.point", c0, cfg.c_mid)?;
    init.fcn("dvfe.vfe2.point", c0, cfg.c_mid)?;
    init.fcn("dvfe.vfe2.fuse", 2 * cfg.c_mid, cfg.c1)?;
    Ok(())
}

/// Row groups describing which points belong to which voxel.
#[derive(Clone, Debug)]
pub struct VoxelGroups {
    pub voxels: Arc<Segments>,
    pub point_to_voxel: Arc<Vec<usize>>,
}

impl VoxelGroups {
    pub fn num_voxels(&self) -> usize {
        self.voxels.len()
    }
}

/// One VFE layer. Without `prev_voxel` it aggregates `FCN(x)`; with it, it
/// aggregates `FCN([propagate(prev_voxel), FCN(x)])`. Returns the point-wise
/// features fed to the aggregation and the aggregated voxel features.
pub fn vfe_layer<T: Real>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: Var,
    groups: &VoxelGroups,
    mode: AggregateMode,
    prev_voxel: Option<Var>,
) -> Result<(Var, Var)> {
    let p = fcn(ctx, &format!("{prefix}.point"), x)?;
    let h = match prev_voxel {
        None => p,
        Some(v) => {
            let spread = ctx.tape.gather_rows(v, groups.point_to_voxel.clone())?;
            let cat = ctx.tape.concat_cols(&[spread, p])?;
            fcn(ctx, &format!("{prefix}.fuse"), cat)?
        }
    };
    let agg = ctx
        .tape
        .segment_reduce(h, groups.voxels.clone(), reduce_mode(mode))?;
    Ok((h, agg))
}

/// Voxel-wise feature map `N_V x C_1` from augmented point features.
pub fn dvfe_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    features: Var,
    groups: &VoxelGroups,
) -> Result<Var> {
    let (_, v1) = vfe_layer(ctx, "dvfe.vfe1", features, groups, cfg.aggregate, None)?;
    let (_, v2) = vfe_layer(ctx, "dvfe.vfe2", features, groups, cfg.aggregate, Some(v1))?;
    Ok(v2)
}

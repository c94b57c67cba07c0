//! A small reverse-mode autodiff core sized for point-cloud transformers.
//!
//! Values live on a [`Tape`]; every op records enough to run its backward
//! pass. Layers bind named parameters from [`ModelParams`] through a [`Ctx`],
//! which also decides which parameters are frozen and whether batch
//! normalization runs on batch or running statistics.

mod checkpoint;
mod error;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    apply_running_updates, batch_norm, fcn, layer_norm, linear, mlp, multi_head_attention, window_self_attention, Ctx, RunningUpdate,
    BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use optim::{adamw_step, cyclic_lr, OptimState};
pub use params::{is_buffer, ModelParams, ParamInit};
pub use real::{matmul_into, Real};
pub use tape::{CustomBackward, Gradients, Reduce, Segments, Tape, Var, IGNORE_LABEL};
pub use tensor::Tensor;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{NnError, Result};
use crate::params::ModelParams;
use crate::real::Real;
use crate::tape::{Gradients, Segments, Tape, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Batch statistics observed by a batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Binds named parameters to tape leaves for one forward pass.
///
/// Parameters under a frozen prefix become constants, and batch-norm layers
/// under a frozen prefix run on their running statistics.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    params: &'a ModelParams<T>,
    training: bool,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var>>,
    updates: RefCell<Vec<RunningUpdate<T>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ModelParams<T>, training: bool) -> Self {
        Self {
            tape,
            params,
            training,
            frozen: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_frozen<S: Into<String>>(mut self, prefixes: impl IntoIterator<Item = S>) -> Self {
        self.frozen.extend(prefixes.into_iter().map(Into::into));
        self
    }

    pub fn params(&self) -> &ModelParams<T> {
        self.params
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Leaf for a named parameter, created once per context.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.tape.leaf(t, !self.is_frozen(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses an existing tape value for a named parameter in this pass.
    pub fn bind(&self, name: &str, v: Var) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    /// Gradients of every trainable parameter bound in this pass. Bound
    /// parameters the loss does not reach get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); self.tape.with_value(*v, |t| t.len())]);
                (name.clone(), g)
            })
            .collect()
    }

    pub fn take_running_updates(&self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

/// Folds observed batch statistics into the stored running averages.
pub fn apply_running_updates<T: Real>(
    params: &mut ModelParams<T>,
    updates: &[RunningUpdate<T>],
    momentum: f64,
) -> Result<()> {
    let m = T::lit(momentum);
    for u in updates {
        for (suffix, obs) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let t = params.get_mut(&format!("{}.{suffix}", u.prefix))?;
            for (r, o) in t.data_mut().iter_mut().zip(obs) {
                *r = (T::one() - m) * *r + m * *o;
            }
        }
    }
    Ok(())
}

/// `x · W + b`; the bias is optional in the parameter set.
pub fn linear<T: Real>(ctx: &Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let y = ctx.tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if ctx.has(&bias) {
        ctx.tape.add_bias(y, ctx.param(&bias)?)
    } else {
        Ok(y)
    }
}

pub fn batch_norm<T: Real>(ctx: &Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    if ctx.training && !ctx.is_frozen(prefix) {
        let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
        ctx.updates.borrow_mut().push(RunningUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
        Ok(y)
    } else {
        let mean = ctx.params.get(&format!("{prefix}.running_mean"))?;
        let var = ctx.params.get(&format!("{prefix}.running_var"))?;
        ctx.tape
            .batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
    }
}

/// Linear, batch norm, rectifier.
pub fn fcn<T: Real>(ctx: &Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = linear(ctx, &format!("{prefix}.fc"), x)?;
    let y = batch_norm(ctx, &format!("{prefix}.bn"), y)?;
    Ok(ctx.tape.relu(y))
}

pub fn layer_norm<T: Real>(ctx: &Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    ctx.tape.layer_norm(x, gamma, beta, LN_EPS)
}

/// Two dense layers with a rectifier between. The caller adds any residual.
pub fn mlp<T: Real>(ctx: &Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(ctx, &format!("{prefix}.fc1"), x)?;
    let h = ctx.tape.relu(h);
    linear(ctx, &format!("{prefix}.fc2"), h)
}

/// Self-attention inside each group of rows. Queries and keys see `x + pe`,
/// values see `x`. Rows outside every group come out as zeros.
pub fn window_self_attention<T: Real>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: Var,
    pe: Option<Var>,
    windows: Arc<Segments>,
    heads: usize,
) -> Result<Var> {
    let qk_in = match pe {
        Some(pe) => ctx.tape.add(x, pe)?,
        None => x,
    };
    let q = linear(ctx, &format!("{prefix}.q"), qk_in)?;
    let k = linear(ctx, &format!("{prefix}.k"), qk_in)?;
    let v = linear(ctx, &format!("{prefix}.v"), x)?;
    let a = ctx.tape.window_attention(q, k, v, windows, heads)?;
    linear(ctx, &format!("{prefix}.o"), a)
}

/// Self-attention over one token sequence with a key-padding mask.
pub fn multi_head_attention<T: Real>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: Var,
    pe: Option<Var>,
    valid: &[bool],
    heads: usize,
) -> Result<Var> {
    let rows: Vec<usize> = (0..valid.len()).filter(|i| valid[*i]).collect();
    if rows.is_empty() {
        return Err(NnError::AllMasked);
    }
    let windows = Arc::new(Segments::from_lists(&[rows]));
    window_self_attention(ctx, prefix, x, pe, windows, heads)
}

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::params::{is_buffer, ModelParams};
use crate::real::Real;

/// AdamW moments and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Steps in one full up-and-down cycle.
    pub cycle_len: u64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(cycle_len: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            base_lr: 1e-5,
            max_lr: 1e-3,
            cycle_len,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        cyclic_lr(self.step, self)
    }
}

/// Triangular schedule: base to max over the first half cycle, back to base
/// over the second.
pub fn cyclic_lr<T>(step: u64, opt: &OptimState<T>) -> f64 {
    if opt.cycle_len == 0 {
        return opt.base_lr;
    }
    let half = opt.cycle_len as f64 / 2.0;
    let pos = (step % opt.cycle_len) as f64;
    let frac = if pos <= half { pos / half } else { (opt.cycle_len as f64 - pos) / half };
    opt.base_lr + (opt.max_lr - opt.base_lr) * frac
}

/// One AdamW update of the parameters that have gradients. Returns the
/// learning rate used. Nothing is modified if any gradient is non-finite.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    opt: &mut OptimState<T>,
) -> Result<f64> {
    for (name, g) in grads {
        if is_buffer(name) {
            continue;
        }
        let p = params.get(name)?;
        if p.len() != g.len() {
            return Err(NnError::Shape {
                op: "adamw",
                detail: format!("{name}: {} values, {} gradients", p.len(), g.len()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGrad(name.clone()));
        }
    }
    let lr = cyclic_lr(opt.step, opt);
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let c1 = T::one() - T::lit(opt.beta1.powi(t));
    let c2 = T::one() - T::lit(opt.beta2.powi(t));
    let (lr_t, wd, eps) = (T::lit(lr), T::lit(opt.weight_decay), T::lit(opt.eps));
    for (name, g) in grads {
        if is_buffer(name) {
            continue;
        }
        let n = g.len();
        let m = opt.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = opt.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let theta = params.get_mut(name)?.data_mut();
        for i in 0..n {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            theta[i] -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(theta: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new(0);
        p.insert("w", Tensor::scalar(theta)).unwrap();
        p
    }

    fn constant_lr(lr: f64, wd: f64) -> OptimState<f64> {
        let mut o = OptimState::new(10);
        o.base_lr = lr;
        o.max_lr = lr;
        o.weight_decay = wd;
        o
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let g = BTreeMap::from([("w".to_string(), vec![1.0])]);
        adamw_step(&mut p, &g, &mut constant_lr(1e-3, 0.0)).unwrap();
        assert!((p.get("w").unwrap().item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = single(1.0);
        let g = BTreeMap::from([("w".to_string(), vec![1.0])]);
        adamw_step(&mut p, &g, &mut constant_lr(1e-3, 0.05)).unwrap();
        assert!((p.get("w").unwrap().item() - (1.0 - 1.05e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(0.7);
        let g = BTreeMap::from([("w".to_string(), vec![0.0])]);
        let mut o = constant_lr(1e-3, 0.0);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut o).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn nan_gradient_is_named() {
        let mut p = single(0.7);
        let g = BTreeMap::from([("w".to_string(), vec![f64::NAN])]);
        let e = adamw_step(&mut p, &g, &mut constant_lr(1e-3, 0.0)).unwrap_err();
        assert!(e.to_string().contains("`w`"));
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn triangular_schedule() {
        let o = OptimState::<f32>::new(100);
        assert!((cyclic_lr(0, &o) - 1e-5).abs() < 1e-15);
        assert!((cyclic_lr(50, &o) - 1e-3).abs() < 1e-15);
        assert!((cyclic_lr(100, &o) - 1e-5).abs() < 1e-15);
        assert!((cyclic_lr(25, &o) - cyclic_lr(75, &o)).abs() < 1e-15);
    }
}

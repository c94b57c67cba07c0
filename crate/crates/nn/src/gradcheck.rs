use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input, element) where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

const STEP: f64 = 1e-5;
/// Keeps the relative error meaningful when both gradients are near zero.
const FLOOR: f64 = 1e-6;

/// Checks every input element of a scalar function built on a 64-bit tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = f(&tape, &vars)?;
        Ok(tape.item(y))
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&tape, &vars)?;
    let grads = tape.backward(y)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

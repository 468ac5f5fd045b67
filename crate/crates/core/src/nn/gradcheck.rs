use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// `max |a − n| / max(|a|, |n|, 1e-3)` over checked elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Elements whose ±h perturbation crossed a ReLU or argmax boundary.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

const REL_FLOOR: f64 = 1e-3;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).data[0], tape.branch_signature()))
}

/// Checks `f`'s gradient with respect to every element of `inputs`.
///
/// `f` must build a scalar on the tape from the given leaves.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].len()],
        };
        for j in 0..inputs[i].len() {
            let x = inputs[i].data[j];
            probe[i].data[j] = x + h;
            let (plus, sig_p) = eval(&f, &probe)?;
            probe[i].data[j] = x - h;
            let (minus, sig_m) = eval(&f, &probe)?;
            probe[i].data[j] = x;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

//! Central finite-difference checks against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` seen.
    pub max_rel_err: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares tape gradients of a scalar function against central differences
/// with step `h`, for every element of every input with `requires_grad`.
///
/// When `max_elems` is set, at most that many evenly spaced elements per
/// input are probed.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64, max_elems: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = tape.grad(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let stride = match max_elems {
            Some(m) if m > 0 && t.numel() > m => t.numel() / m,
            _ => 1,
        };
        for e in (0..t.numel()).step_by(stride) {
            let orig = t.data()[e];
            probe[ti].data_mut()[e] = orig + h;
            let plus = eval(&build, &probe)?;
            probe[ti].data_mut()[e] = orig - h;
            let minus = eval(&build, &probe)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[e] - numeric).abs() / analytic[e].abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (ti, e);
            }
        }
    }
    Ok(report)
}

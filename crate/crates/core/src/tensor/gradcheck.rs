//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so components whose true
/// gradient is zero are judged on absolute error instead of exploding.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the component with the largest relative error.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), false)?;
    let y = f(&tape, xv)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Compare the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`. Passes iff the max relative error is
/// below `tol`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let y = f(&tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        tol,
        passed: true,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors, so that gradients which are zero
/// up to rounding compare in absolute terms.
const REL_FLOOR: f64 = 1e-3;

/// Compares the tape gradient of a scalar function `f` at `point` against
/// central differences with step `eps`.
///
/// The relative error for element `i` is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn finite_difference_check<F, E>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<CheckReport, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::invalid("finite_difference_check", format!("eps {eps} outside (0, 1e-2]")).into());
    }
    let eval = |p: &Tensor| -> Result<f64, E> {
        let tape = Tape::new();
        let x = tape.constant(p.clone())?;
        let y = f(&tape, x)?;
        if y.value().numel() != 1 {
            return Err(AutodiffError::NonScalar(y.shape()).into());
        }
        Ok(y.item())
    };

    let tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&tape, x)?;
    tape.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut report = CheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, tol, passed: true };
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = finite_difference_check(|t, x| {
            let c = t.constant(Tensor::from_vec(vec![2.0, -3.0, 0.5]))?;
            x.mul(c)?.sum()
        }, &p, 1e-5, 1e-9)
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let p = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            finite_difference_check(|_, x| x.silu(), &p, 1e-5, 1e-4),
            Err(AutodiffError::NonScalar(_))
        ));
        assert!(finite_difference_check(|_, x| x.sum(), &p, 0.5, 1e-4).is_err());
    }

    #[test]
    fn quadratic_matches_closely() {
        let p = Tensor::from_vec(vec![0.5]);
        let r = finite_difference_check(|_, x| x.square()?.sum(), &p, 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert!(r.max_abs_error < 1e-8);
    }
}

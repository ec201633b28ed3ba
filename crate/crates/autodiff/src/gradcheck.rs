//! Central finite-difference verification of reverse-mode gradients.

/// Finite difference step used at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences at
/// `FD_STEP` carry roughly `1e-10` of absolute noise, so below this magnitude
/// the comparison degrades to an absolute one.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Input index where the relative error peaked.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient returned by `f` against central differences of its
/// value at every input coordinate.
///
/// `f` maps an input vector to `(value, gradient)`.
pub fn grad_check<Fun>(mut f: Fun, inputs: &[f64], tolerance: f64) -> GradCheckReport
where
    Fun: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    grad_check_indices(&mut f, inputs, &all, tolerance)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_indices<Fun>(mut f: Fun, inputs: &[f64], indices: &[usize], tolerance: f64) -> GradCheckReport
where
    Fun: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "gradient length must match inputs");
    let mut x = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
        tolerance,
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let (plus, _) = f(&x);
        x[i] = orig - FD_STEP;
        let (minus, _) = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[3.0], 1e-8);
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|_| (4.2, vec![0.0, 0.0]), &[1.0, -2.0], 1e-8);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(|x| (x[0].sin(), vec![x[0].sin()]), &[0.4], 1e-4);
        assert!(!r.passed());
    }
}

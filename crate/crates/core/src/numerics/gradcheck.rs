use super::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(tensor, element)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative errors are `|a − n| / max(|a|, |n|, floor)`, so entries whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const DEFAULT_MAGNITUDE_FLOOR: f64 = 1e-4;

/// Central-difference gradient check: `(f(x+h) − f(x−h)) / 2h` per element of
/// every tensor in `params`, compared with `analytic`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per tensor");
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), params[ti].len(), "gradient shape for tensor {ti}");
        for ei in 0..grad.len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let minus = f(&work);
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(DEFAULT_MAGNITUDE_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_to_machine_precision() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let w = [3.0, -1.0, 2.0];
        let f = |p: &[Tensor]| p[0].data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let r = finite_difference_check(f, &[x], &[w.to_vec()], 1e-5, 1e-9);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![4.0, 5.0]);
        let r = finite_difference_check(|_| 7.0, &[x], &[vec![0.0, 0.0]], 1e-5, 1e-12);
        assert_eq!(r.max_abs_err, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::vector(vec![2.0]);
        let f = |p: &[Tensor]| p[0].data()[0].powi(2);
        let r = finite_difference_check(f, &[x], &[vec![3.0]], 1e-5, 1e-6);
        assert!(!r.passed);
        assert_eq!(r.worst, Some((0, 0)));
    }
}

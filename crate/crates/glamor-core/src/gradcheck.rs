//! Central-finite-difference gradient checking.
//!
//! Every differentiable module in the crate validates its hand-written
//! backward pass against this checker.

use crate::error::{Error, Result};

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference check over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Index and error of the worst coordinate, for diagnostics.
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_parameter_errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// A scalar-valued differentiable function of a flat parameter vector.
pub trait ScalarFn {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Adapter so tests can build a [`ScalarFn`] from two closures.
pub struct ClosureFn<V, G>
where
    V: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarFn for ClosureFn<V, G>
where
    V: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&self, params: &[f64]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(params)
    }
}

/// Compare the analytic gradient of `f` at `params` against central
/// differences `(f(p + h e_i) - f(p - h e_i)) / 2h` coordinate by
/// coordinate. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F: ScalarFn>(
    f: &F,
    params: &[f64],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
    grad_check_named(f, params, &names, tolerance, step)
}

/// [`grad_check`] with caller-supplied parameter names in the report.
pub fn grad_check_named<F: ScalarFn>(
    f: &F,
    params: &[f64],
    names: &[String],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::config(format!("grad_check step {step} must be > 0")));
    }
    if names.len() != params.len() {
        return Err(Error::shape(format!(
            "grad_check got {} names for {} parameters",
            names.len(),
            params.len()
        )));
    }
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "analytic gradient length {} != parameter count {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut per_parameter_errors = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    for i in 0..params.len() {
        let original = work[i];
        work[i] = original + step;
        let f_plus = f.value(&work)?;
        work[i] = original - step;
        let f_minus = f.value(&work)?;
        work[i] = original;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::non_finite(format!(
                "grad_check aborted: f({}) gave ({f_plus}, {f_minus})",
                names[i]
            )));
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_error = max_rel_error.max(rel);
        per_parameter_errors.push((names[i].clone(), rel));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_parameter_errors,
        passed: max_rel_error <= tolerance,
    })
}

/// Multi-step variant for deep composites: per-coordinate error is the
/// minimum over central differences at several steps.
///
/// A single step misfires in two ways that say nothing about the analytic
/// gradient: a ReLU/hinge/argmax kink inside `[p - h, p + h]` corrupts the
/// difference quotient at large steps, and for near-zero gradient
/// coordinates the f64 rounding of `f` swamps the quotient at small steps.
/// Both artifacts move with `h`; a genuinely wrong analytic gradient
/// disagrees at every step, so taking the per-coordinate minimum keeps bug
/// detection while suppressing step-choice false alarms. Retries run only
/// when the primary step fails, using `per_parameter_errors` from each pass.
pub fn grad_check_multi_step<F: ScalarFn>(
    f: &F,
    params: &[f64],
    tolerance: f64,
    steps: &[f64],
) -> Result<GradCheckReport> {
    let (&primary, retries) = steps
        .split_first()
        .ok_or_else(|| Error::config("grad_check_multi_step needs at least one step"))?;
    let first = grad_check(f, params, tolerance, primary)?;
    let mut per_parameter_errors = first.per_parameter_errors;
    let mut max_rel_error = first.max_rel_error;
    for &step in retries {
        if max_rel_error <= tolerance {
            break;
        }
        let retry = grad_check(f, params, tolerance, step)?;
        for ((_, slot), (_, e)) in per_parameter_errors.iter_mut().zip(retry.per_parameter_errors) {
            *slot = slot.min(e);
        }
        max_rel_error = per_parameter_errors
            .iter()
            .fold(0.0f64, |m, (_, e)| m.max(*e));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_parameter_errors,
        passed: max_rel_error <= tolerance,
    })
}

/// The step ladder used for whole-model checks.
pub const COMPOSITE_STEPS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-6];

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> impl ScalarFn {
        ClosureFn {
            value: |p: &[f64]| Ok(p.iter().map(|x| x * x).sum()),
            gradient: |p: &[f64]| Ok(p.iter().map(|x| 2.0 * x).collect()),
        }
    }

    #[test]
    fn quadratic_passes() {
        let report = grad_check(&quadratic(), &[3.0], 1e-9, 1e-5).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error <= 1e-9);
    }

    #[test]
    fn multivariate_quadratic_passes() {
        let report = grad_check(&quadratic(), &[3.0, -1.5, 0.25, 7.0], 1e-8, 1e-5).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn wrong_gradient_fails() {
        let wrong = ClosureFn {
            value: |p: &[f64]| Ok(p.iter().map(|x| x * x).sum()),
            gradient: |p: &[f64]| Ok(p.iter().map(|x| 4.0 * x).collect()), // scaled x2
        };
        let report = grad_check(&wrong, &[3.0, 1.0], 1e-4, 1e-5).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_value_aborts() {
        let f = ClosureFn {
            value: |p: &[f64]| Ok(1.0 / (p[0] - p[0])), // inf
            gradient: |_: &[f64]| Ok(vec![0.0]),
        };
        let err = grad_check(&f, &[1.0], 1e-4, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(&quadratic(), &[1.0], 1e-4, 0.0).is_err());
    }

    #[test]
    fn report_names_worst_coordinate() {
        let half_wrong = ClosureFn {
            value: |p: &[f64]| Ok(p.iter().map(|x| x * x).sum()),
            gradient: |p: &[f64]| Ok(vec![2.0 * p[0], 3.0 * p[1]]),
        };
        let report = grad_check(&half_wrong, &[1.0, 1.0], 1e-6, 1e-5).unwrap();
        assert_eq!(report.worst().unwrap().0, "p1");
    }

    #[test]
    fn multi_step_still_rejects_wrong_gradients() {
        let wrong = ClosureFn {
            value: |p: &[f64]| Ok(p.iter().map(|x| x * x).sum()),
            gradient: |p: &[f64]| Ok(p.iter().map(|x| 4.0 * x).collect()),
        };
        let report =
            grad_check_multi_step(&wrong, &[3.0, 1.0], 1e-4, &COMPOSITE_STEPS).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn multi_step_resolves_a_kink_near_the_eval_point() {
        // |x| has a kink at 0; evaluate just inside the 1e-5 window so the
        // primary step misfires and a smaller step must recover
        let abs = ClosureFn {
            value: |p: &[f64]| Ok(p[0].abs()),
            gradient: |p: &[f64]| Ok(vec![p[0].signum()]),
        };
        let x = 3e-6;
        let single = grad_check(&abs, &[x], 1e-4, 1e-5).unwrap();
        assert!(!single.passed);
        let multi = grad_check_multi_step(&abs, &[x], 1e-4, &[1e-5, 1e-6, 1e-7]).unwrap();
        assert!(multi.passed, "{}", multi.max_rel_error);
    }
}

//! Finite-difference verification of tape gradients.

use super::{GradError, Tape, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf index, flat coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub failure: Option<GradCheckFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GradCheckFailure {
    Mismatch {
        leaf: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_error: f64,
    },
    NonFinite {
        leaf: usize,
        index: usize,
    },
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradCheckFailure::Mismatch {
                leaf,
                index,
                analytic,
                numeric,
                rel_error,
            } => write!(
                f,
                "gradient mismatch at leaf {leaf} coordinate {index}: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_error:e}"
            ),
            GradCheckFailure::NonFinite { leaf, index } => {
                write!(f, "non-finite loss when perturbing leaf {leaf} coordinate {index}")
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Backward gradients of `build` at `leaves`.
///
/// `build` receives a fresh tape with one parameter per leaf (same order)
/// and must return the scalar output.
pub fn analytic_gradient<F>(build: &F, leaves: &[Tensor]) -> Result<Vec<Tensor>, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn evaluate_scalar<F>(build: &F, leaves: &[Tensor]) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(GradError::NonScalarOutput {
            shape: value.shape().to_vec(),
        });
    }
    Ok(value.item())
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` per coordinate.
///
/// A non-finite evaluation yields `Err((leaf, index))` for that coordinate.
pub fn numeric_gradient<F>(
    build: &F,
    leaves: &[Tensor],
    step: f64,
) -> Result<Result<Vec<Tensor>, (usize, usize)>, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let mut work = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for leaf in 0..leaves.len() {
        let mut grad = Tensor::zeros(leaves[leaf].shape());
        for index in 0..leaves[leaf].len() {
            let orig = work[leaf].data()[index];
            work[leaf].data_mut()[index] = orig + step;
            let plus = evaluate_scalar(build, &work)?;
            work[leaf].data_mut()[index] = orig - step;
            let minus = evaluate_scalar(build, &work)?;
            work[leaf].data_mut()[index] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(Err((leaf, index)));
            }
            grad.data_mut()[index] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(Ok(out))
}

pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tol,
        failure: None,
    };
    let mut worst_values = (0.0, 0.0);
    for (leaf, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (index, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.coordinates += 1;
            let err = relative_error(av, nv);
            if !err.is_finite() {
                report.failure = Some(GradCheckFailure::NonFinite { leaf, index });
                report.worst = Some((leaf, index));
                report.max_rel_error = f64::INFINITY;
                return report;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((leaf, index));
                worst_values = (av, nv);
            }
        }
    }
    if report.max_rel_error >= tol {
        let (leaf, index) = report.worst.expect("at least one coordinate");
        report.failure = Some(GradCheckFailure::Mismatch {
            leaf,
            index,
            analytic: worst_values.0,
            numeric: worst_values.1,
            rel_error: report.max_rel_error,
        });
    }
    report
}

/// Compares backward gradients of `build` with central differences at `leaves`.
pub fn check_gradient<F>(build: F, leaves: &[Tensor], tol: f64, step: f64) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    if !(step > 0.0) {
        return Err(GradError::InvalidStep { step });
    }
    let analytic = analytic_gradient(&build, leaves)?;
    match numeric_gradient(&build, leaves, step)? {
        Ok(numeric) => Ok(compare_gradients(&analytic, &numeric, tol)),
        Err((leaf, index)) => Ok(GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst: Some((leaf, index)),
            coordinates: leaves.iter().map(Tensor::len).sum(),
            tol,
            failure: Some(GradCheckFailure::NonFinite { leaf, index }),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape, vars: &[Var]) -> Result<Var, GradError> {
        let sq = tape.square(vars[0])?;
        let s = tape.sum(sq)?;
        tape.scale(s, 0.5)
    }

    #[test]
    fn quadratic_passes() {
        let leaves = [Tensor::vector(vec![1.0, -2.0, 0.5])];
        let report = check_gradient(quadratic, &leaves, 1e-4, 1e-5).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn corrupted_slot_is_named() {
        let leaves = [Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut analytic = analytic_gradient(&quadratic, &leaves).unwrap();
        let numeric = numeric_gradient(&quadratic, &leaves, 1e-5).unwrap().unwrap();
        analytic[0].data_mut()[1] += 1.0;
        let report = compare_gradients(&analytic, &numeric, 1e-4);
        match report.failure {
            Some(GradCheckFailure::Mismatch { leaf, index, .. }) => assert_eq!((leaf, index), (0, 1)),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        // log(x) at x = 1e-6 is finite, at 1e-6 − h it is NaN.
        let build = |tape: &mut Tape, vars: &[Var]| {
            let l = tape.log(vars[0])?;
            tape.sum(l)
        };
        let leaves = [Tensor::vector(vec![1.0, 1e-6])];
        let report = check_gradient(build, &leaves, 1e-4, 1e-5).unwrap();
        assert_eq!(report.failure, Some(GradCheckFailure::NonFinite { leaf: 0, index: 1 }));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let leaves = [Tensor::vector(vec![1.0])];
        assert!(check_gradient(quadratic, &leaves, 1e-4, 0.0).is_err());
    }
}

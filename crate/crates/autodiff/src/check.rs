use crate::error::Result;
use crate::grad::{Param, ParamId};
use crate::tape::{Tape, Var};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` receives a tape and one variable per entry of `params` (in the
/// same order) and must return a scalar. Every coordinate of every parameter
/// with `requires_grad` is perturbed by `±step`.
pub fn finite_diff_check<F>(params: &[Param<f64>], step: f64, loss_fn: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
        let loss = loss_fn(&tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        grads.fill_missing(params);
        grads
    };

    let eval = |ps: &[Param<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p)).collect();
        Ok(loss_fn(&tape, &vars)?.item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for pi in 0..work.len() {
        if !work[pi].requires_grad {
            continue;
        }
        let id = work[pi].id;
        let grad = analytic.get(id).expect("filled above").clone();
        for c in 0..work[pi].value.numel() {
            let orig = work[pi].value.data()[c];
            work[pi].value.data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work[pi].value.data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work[pi].value.data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[c], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((id, c));
            }
        }
    }
    Ok(report)
}

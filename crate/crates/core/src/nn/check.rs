//! Central finite-difference gradient checker, the correctness oracle for the
//! hand-written backward passes.

use super::{Gradients, ParamSet};
use crate::{Error, Result};

/// Compares analytic gradients against central finite differences of `f`,
/// coordinate by coordinate, and returns the worst relative discrepancy.
///
/// The relative measure is `|a − n| / (|a| + |n|)`; coordinates where both
/// magnitudes are below 1e−5 are compared absolutely so float noise in the
/// difference quotient cannot dominate a near-zero gradient.
pub fn grad_check<F>(mut f: F, params: &ParamSet, analytic: &Gradients, delta: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(delta > 0.0, "finite-difference step must be positive");
    let base = params.flatten();
    let ana = analytic.flatten();
    assert_eq!(
        base.len(),
        ana.len(),
        "analytic gradient shape does not mirror parameters"
    );
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut flat = base.clone();
        flat[k] = base[k] + delta;
        probe.assign_flat(&flat);
        let up = f(&probe);
        flat[k] = base[k] - delta;
        probe.assign_flat(&flat);
        let down = f(&probe);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective non-finite while probing coordinate {k}"
            )));
        }
        let numeric = (up - down) / (2.0 * delta);
        let a = ana[k];
        let scale = a.abs() + numeric.abs();
        let err = if scale < 1e-5 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

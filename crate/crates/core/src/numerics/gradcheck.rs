//! Central-difference verification of backward-pass gradients.

use crate::error::{Error, Result};
use crate::numerics::adam::ParamStore;
use crate::numerics::graph::Gradients;

/// Compare analytic gradients against central finite differences.
///
/// `f` must be deterministic (freeze any perturbation seeds) and return the
/// scalar loss together with the backward-pass gradients at the given point.
/// Returns the maximum relative error over all parameter elements, where
/// absolute differences below 1e-6 count as zero.
pub fn grad_check<P, F>(mut f: F, params: &mut P, h: f64) -> Result<f64>
where
    P: ParamStore,
    F: FnMut(&P) -> Result<(f64, Gradients)>,
{
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }

    let mut max_rel: f64 = 0.0;
    for name in params.param_names() {
        let n = params
            .param(&name)
            .ok_or_else(|| Error::Contract(format!("grad_check: unknown parameter {name}")))?
            .len();
        for i in 0..n {
            let original = params.param(&name).unwrap().data()[i];

            params.param_mut(&name).unwrap().data_mut()[i] = original + h;
            let (lp, _) = f(params)?;
            params.param_mut(&name).unwrap().data_mut()[i] = original - h;
            let (lm, _) = f(params)?;
            params.param_mut(&name).unwrap().data_mut()[i] = original;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric("grad_check: non-finite perturbed loss".into()));
            }
            let numeric = (lp - lm) / (2.0 * h);
            let an = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let diff = (an - numeric).abs();
            if diff > 1e-6 {
                let rel = diff / an.abs().max(numeric.abs());
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}

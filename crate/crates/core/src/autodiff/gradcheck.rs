//! Finite-difference verification of reverse-mode gradients.

use super::{AdError, AdResult, NodeId, ParameterStore, Tape};
use crate::rng;
use rand::Rng;

/// Compares analytic gradients of `f` against central differences at
/// `samples_per_param` randomly chosen coordinates of every parameter.
///
/// `f` must build a scalar loss from the bound store on the given tape and
/// be deterministic in the parameter values. Returns the maximum relative
/// error `|a - n| / max(1e-8, |a| + |n|)` over all sampled coordinates.
pub fn grad_check<F>(
    f: F,
    point: &ParameterStore,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> AdResult<f64>
where
    F: Fn(&mut Tape, &super::BoundStore) -> AdResult<NodeId>,
{
    if !(eps > 0.0) {
        return Err(AdError::GradCheck(format!("eps must be positive, got {eps}")));
    }

    let eval = |store: &ParameterStore| -> AdResult<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind_store(store);
        let loss = f(&mut tape, &bound)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(AdError::NonFinite { op: "grad_check loss" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bound = tape.bind_store(point);
    let loss = f(&mut tape, &bound)?;
    let analytic = tape.backward(loss)?;

    let mut max_rel = 0.0_f64;
    for (pi, (name, value)) in point.iter().enumerate() {
        let n = value.len();
        if n == 0 {
            continue;
        }
        let mut stream = rng::stream_rng(seed, "grad_check", pi as u64);
        let samples = samples_per_param.min(n);
        for _ in 0..samples {
            let flat = stream.gen_range(0..n);
            // Index in logical row-major order; gradients propagated through
            // layout-changing ops (e.g. transpose) need not be contiguous.
            let a = analytic
                .get(name)
                .and_then(|g| g.iter().nth(flat).copied())
                .ok_or_else(|| AdError::GradCheck(format!("no gradient for {name}")))?;

            let mut plus = point.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += eps;
            let mut minus = point.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);

            if !a.is_finite() || !numeric.is_finite() {
                return Err(AdError::NonFinite { op: "grad_check" });
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

//! Central finite-difference oracle for gradient verification.
//!
//! Independent of the tape: callers supply a closure that rebuilds the
//! scalar loss from flat parameter vectors, and this module perturbs each
//! coordinate numerically.

/// Central differences with step `h` for a scalar function of several
/// flat parameter vectors.
pub fn central_diff<F>(mut f: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += h;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[p][i] -= h;
            let fm = f(&minus);
            grad[i] = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Relative error |a − n| / max(1, |a|, |n|), reduced over all entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

//! Central finite differences for verifying analytic gradients.
//!
//! Deliberately independent of any model code: the checker only needs a
//! closure mapping a flat parameter vector to a scalar loss, so it exercises
//! exactly the public forward path of whatever it is pointed at.

/// Central-difference gradient of `f` at `x` with half-step `step`.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Worst relative error between an analytic gradient and its finite-difference
/// estimate, with an absolute floor so near-zero components do not blow up the
/// ratio: `|a - n| / max(1, |a|, |n|)` elementwise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

//! Finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only calls a closure that maps a
//! flat parameter vector to a scalar, so it can check any implementation path.

/// Central finite differences: g_i ≈ (f(x+h·e_i) − f(x−h·e_i)) / 2h.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-8)
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Convenience: check a scalar function's analytic gradient at `x` against
/// central differences with step `h`, returning the max relative error.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_difference(f, x, h);
    max_rel_err(analytic, &numeric)
}

/// Central-difference numerical gradient of a scalar function.
///
/// Component `i` is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`. This is the
/// reference every analytic backward pass in the crate is tested against; it
/// lives in the library (not just test code) so downstream users can check
/// their own extensions the same way.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite_diff_grad needs a positive step");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero gradients from blowing up the ratio on noise at
/// the finite-difference precision limit.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`rel_err`] between two gradient vectors.
pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len(), "gradient length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| rel_err(g, w, floor))
        .fold(0.0, f64::max)
}

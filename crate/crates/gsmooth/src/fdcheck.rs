//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only needs a closure evaluating
//! the objective at a flat parameter vector, so it can cross-check any
//! gradient path in the crate.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest mismatch between an analytic gradient and the central-difference
/// oracle, measured as `|a - fd| / max(|fd|, floor)`.
pub fn max_relative_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(floor))
        .fold(0.0, f64::max)
}

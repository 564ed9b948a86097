//! Gaussian smoothing: closed forms, Monte-Carlo estimators, and bound checks.
//!
//! Kernel convention (fixed once, everything below depends on it): smoothing
//! integrates against the density `pi^(-d/2) * exp(-||u||^2)`, i.e. the
//! perturbation is `x + sigma*u` with `u ~ N(0, I/2)` — standard deviation
//! `sigma/sqrt(2)` per coordinate. The closed forms (`erf(x/sigma)` in the
//! smoothed relu, `exp(-pi^2 sigma^2)` in the quartic) are consistent with
//! exactly this convention; sampling with a different scale silently rescales
//! `sigma` by `sqrt(2)`. `offset_scale` is the single place the convention
//! enters the samplers, and the unit tests pin it against the closed forms.

pub mod bounds;
pub mod mc;

use std::f64::consts::PI;

/// Per-coordinate standard deviation of the smoothing perturbation at `sigma`.
pub fn offset_scale(sigma: f64) -> f64 {
    sigma * std::f64::consts::FRAC_1_SQRT_2
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Smoothed relu. At `sigma = 0` this is exactly `max(x, 0)`.
pub fn smooth_relu(x: f64, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return relu(x);
    }
    let t = x / sigma;
    0.5 * x * (1.0 + libm::erf(t)) + sigma / (2.0 * PI.sqrt()) * (-t * t).exp()
}

/// Smoothed squared relu. At `sigma = 0` this is exactly `relu(x)^2`.
///
/// The true value is an expectation of a square and therefore non-negative;
/// in the far negative tail the two terms cancel to roundoff, so the result
/// is clamped at zero.
pub fn smooth_relu_sq(x: f64, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        let r = relu(x);
        return r * r;
    }
    let t = x / sigma;
    let v = 0.25 * (1.0 + libm::erf(t)) * (sigma * sigma + 2.0 * x * x)
        + sigma * x / (2.0 * PI.sqrt()) * (-t * t).exp();
    v.max(0.0)
}

/// Smoothed squared norm: `||x||^2 + sigma^2 d / 2`.
pub fn smooth_sq_norm(x: &[f64], sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    let sq: f64 = x.iter().map(|v| v * v).sum();
    sq + sigma * sigma * x.len() as f64 / 2.0
}

//! Analytic test functions and numeric verifiers for the smoothing bounds.
//!
//! Each verifier evaluates both sides of an inequality on a point set and
//! reports per-point margins. A point is a violation when the observed side
//! exceeds the bound by more than `TOLERANCE`, which absorbs float rounding
//! on top of the analytic expressions.

use crate::error::{Error, Result};
use crate::smoothing::mc::{self, McEstimate};
use std::f64::consts::PI;

/// Rounding slack applied on top of every analytic bound.
pub const TOLERANCE: f64 = 1e-9;

/// A function with closed-form smoothing, for cross-checking estimators and
/// bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    /// `f(x) = 1/2 ||x||^2` in `dim` dimensions; gradient-Lipschitz constant 1.
    Quadratic { dim: usize },
    /// `f(x) = x^4 - 2x^2 + cos(2 pi x)` in one dimension.
    Quartic,
}

impl TestFunction {
    pub fn quadratic(dim: usize) -> Self {
        TestFunction::Quadratic { dim }
    }

    pub fn quartic() -> Self {
        TestFunction::Quartic
    }

    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Quadratic { dim } => *dim,
            TestFunction::Quartic => 1,
        }
    }

    /// Gradient-Lipschitz constant used by the bound checks. The quartic is
    /// not globally gradient-Lipschitz; 100 dominates its curvature over the
    /// benchmark domain `[-2, 2] x sigma <= 1` with margin.
    pub fn lipschitz(&self) -> f64 {
        match self {
            TestFunction::Quadratic { .. } => 1.0,
            TestFunction::Quartic => 100.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Quadratic { .. } => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            TestFunction::Quartic => {
                let x = x[0];
                x.powi(4) - 2.0 * x * x + (2.0 * PI * x).cos()
            }
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TestFunction::Quadratic { .. } => x.to_vec(),
            TestFunction::Quartic => {
                let x = x[0];
                vec![4.0 * x.powi(3) - 4.0 * x - 2.0 * PI * (2.0 * PI * x).sin()]
            }
        }
    }

    pub fn smoothed_value(&self, x: &[f64], sigma: f64) -> f64 {
        match self {
            TestFunction::Quadratic { dim } => {
                self.value(x) + sigma * sigma * *dim as f64 / 4.0
            }
            TestFunction::Quartic => {
                let x = x[0];
                let s2 = sigma * sigma;
                x.powi(4) + (3.0 * s2 - 2.0) * x * x + 0.75 * s2 * s2 - s2
                    + (2.0 * PI * x).cos() * (-PI * PI * s2).exp()
            }
        }
    }

    pub fn smoothed_grad(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        match self {
            TestFunction::Quadratic { .. } => x.to_vec(),
            TestFunction::Quartic => {
                let x = x[0];
                let s2 = sigma * sigma;
                vec![
                    4.0 * x.powi(3) + 2.0 * (3.0 * s2 - 2.0) * x
                        - 2.0 * PI * (2.0 * PI * x).sin() * (-PI * PI * s2).exp(),
                ]
            }
        }
    }

    /// Uniform evaluation grid of `n` points spanning `[lo, hi]` on every axis
    /// (diagonal embedding for multi-dimensional functions).
    pub fn grid(&self, lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = if n == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                };
                vec![t; self.dim()]
            })
            .collect()
    }
}

/// One evaluated inequality, with its slack.
#[derive(Debug, Clone)]
pub struct PointCheck {
    pub point: Vec<f64>,
    pub observed: f64,
    pub bound: f64,
}

impl PointCheck {
    pub fn margin(&self) -> f64 {
        self.bound - self.observed
    }

    pub fn violated(&self) -> bool {
        self.observed > self.bound + TOLERANCE
    }
}

/// Outcome of sweeping one inequality over a point set.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub name: &'static str,
    pub checks: Vec<PointCheck>,
}

impl BoundReport {
    pub fn max_observed(&self) -> f64 {
        self.checks.iter().map(|c| c.observed).fold(f64::MIN, f64::max)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| c.violated()).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }
}

fn require_ordered(sigma: f64, tau: f64) -> Result<()> {
    if sigma < 0.0 || tau < sigma {
        return Err(Error::InvalidArgument(format!(
            "bound check needs tau >= sigma >= 0, got sigma={sigma}, tau={tau}"
        )));
    }
    Ok(())
}

/// `|f_tau(x) - f_sigma(x)| <= L d / 4 * (tau^2 - sigma^2)` on `points`.
pub fn check_value_bound(
    tf: &TestFunction,
    sigma: f64,
    tau: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    check_value_bound_with_l(tf, tf.lipschitz(), sigma, tau, points)
}

/// [`check_value_bound`] against a caller-supplied smoothness constant.
pub fn check_value_bound_with_l(
    tf: &TestFunction,
    lipschitz: f64,
    sigma: f64,
    tau: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    require_ordered(sigma, tau)?;
    let bound = lipschitz * tf.dim() as f64 / 4.0 * (tau * tau - sigma * sigma).abs();
    let checks = points
        .iter()
        .map(|p| PointCheck {
            point: p.clone(),
            observed: (tf.smoothed_value(p, tau) - tf.smoothed_value(p, sigma)).abs(),
            bound,
        })
        .collect();
    Ok(BoundReport {
        name: "value_gap",
        checks,
    })
}

/// `||grad f_sigma(x)||^2 <= 2 ||grad f(x)||^2 + L^2 sigma^2 (6+d)^3 / 4`.
pub fn check_grad_norm_bound(
    tf: &TestFunction,
    sigma: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    check_grad_norm_bound_with_l(tf, tf.lipschitz(), sigma, points)
}

/// [`check_grad_norm_bound`] against a caller-supplied smoothness constant.
pub fn check_grad_norm_bound_with_l(
    tf: &TestFunction,
    lipschitz: f64,
    sigma: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bound check needs sigma >= 0, got {sigma}"
        )));
    }
    let l = lipschitz;
    let d = tf.dim() as f64;
    let additive = 0.25 * l * l * sigma * sigma * (6.0 + d).powi(3);
    let checks = points
        .iter()
        .map(|p| {
            let gs: f64 = tf.smoothed_grad(p, sigma).iter().map(|v| v * v).sum();
            let g: f64 = tf.grad(p).iter().map(|v| v * v).sum();
            PointCheck {
                point: p.clone(),
                observed: gs,
                bound: 2.0 * g + additive,
            }
        })
        .collect();
    Ok(BoundReport {
        name: "grad_norm",
        checks,
    })
}

/// `||grad f_tau(x) - grad f_sigma(x)|| <= L ((3+d)/2)^(3/2) sqrt(|tau^2 - sigma^2|)`.
pub fn check_grad_gap_bound(
    tf: &TestFunction,
    sigma: f64,
    tau: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    check_grad_gap_bound_with_l(tf, tf.lipschitz(), sigma, tau, points)
}

/// [`check_grad_gap_bound`] against a caller-supplied smoothness constant.
pub fn check_grad_gap_bound_with_l(
    tf: &TestFunction,
    lipschitz: f64,
    sigma: f64,
    tau: f64,
    points: &[Vec<f64>],
) -> Result<BoundReport> {
    require_ordered(sigma, tau)?;
    let l = lipschitz;
    let d = tf.dim() as f64;
    let bound = l * ((3.0 + d) / 2.0).powf(1.5) * (tau * tau - sigma * sigma).abs().sqrt();
    let checks = points
        .iter()
        .map(|p| {
            let gt = tf.smoothed_grad(p, tau);
            let gs = tf.smoothed_grad(p, sigma);
            let gap: f64 = gt
                .iter()
                .zip(&gs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            PointCheck {
                point: p.clone(),
                observed: gap,
                bound,
            }
        })
        .collect();
    Ok(BoundReport {
        name: "grad_gap",
        checks,
    })
}

/// Smoothing `f_sigma` again by `eta` lands on `f_tau`, `tau = sqrt(sigma^2 + eta^2)`.
/// Verified by Monte Carlo within 3 standard errors.
pub fn check_composition(
    tf: &TestFunction,
    sigma: f64,
    eta: f64,
    points: &[Vec<f64>],
    samples: u64,
    seed: u64,
) -> Result<BoundReport> {
    if sigma < 0.0 || eta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "composition check needs sigma >= 0 and eta > 0, got sigma={sigma}, eta={eta}"
        )));
    }
    let tau = (sigma * sigma + eta * eta).sqrt();
    let mut checks = Vec::with_capacity(points.len());
    for p in points {
        let est: McEstimate =
            mc::smooth_value(|y| tf.smoothed_value(y, sigma), p, eta, samples, seed)?;
        checks.push(PointCheck {
            point: p.clone(),
            observed: (est.value - tf.smoothed_value(p, tau)).abs(),
            bound: 3.0 * est.std_error,
        });
    }
    Ok(BoundReport {
        name: "composition",
        checks,
    })
}

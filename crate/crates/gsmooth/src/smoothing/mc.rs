//! Monte-Carlo smoothing oracle.
//!
//! Sampling is counter-based: the normal draw for coordinate `c` of sample
//! `j` is a pure function of `(seed, j*d + c)` — a SplitMix64 random-access
//! stream pushed through the inverse normal CDF — so estimates are
//! reproducible bit-for-bit, independent of evaluation order, and
//! parallelizable at sample granularity.

use crate::error::{Error, Result};
use crate::smoothing::offset_scale;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub seed: u64,
}

/// Which unbiased form of the smoothed-gradient estimator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradForm {
    /// `(2/sigma) E[u f(x + sigma u)]`
    Moment,
    /// `(2/sigma) E[u (f(x + sigma u) - f(x))]` — same mean, lower variance
    /// whenever `f` carries a constant offset.
    Difference,
}

struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Welford {
            n: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
    }
}

/// SplitMix64 evaluated at position `index` of the stream named by `seed`.
fn splitmix_at(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Open-interval uniform in (0, 1) from 53 high bits.
fn uniform_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw for counter `index` under `seed`.
pub(crate) fn standard_normal(seed: u64, index: u64) -> f64 {
    inverse_normal_cdf(uniform_open(splitmix_at(seed, index)))
}

/// Wichura's AS 241 (PPND16): double-precision inverse of the standard
/// normal CDF.
fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(0.0 < p && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND_A, r) / poly(&PPND_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND_C, r) / poly(&PPND_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND_E, r) / poly(&PPND_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[allow(clippy::excessive_precision)]
const PPND_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
#[allow(clippy::excessive_precision)]
const PPND_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
#[allow(clippy::excessive_precision)]
const PPND_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
#[allow(clippy::excessive_precision)]
const PPND_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
#[allow(clippy::excessive_precision)]
const PPND_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
#[allow(clippy::excessive_precision)]
const PPND_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

fn draw_offset(seed: u64, sample: u64, sigma: f64, out: &mut [f64]) {
    let scale = offset_scale(sigma);
    let d = out.len() as u64;
    for (c, o) in out.iter_mut().enumerate() {
        *o = scale * standard_normal(seed, sample * d + c as u64);
    }
}

/// Unbiased estimate of the smoothed value `f_sigma(x)`.
///
/// `sigma = 0` is the identity transform: returns `f(x)` with zero error.
pub fn smooth_value<F>(mut f: F, x: &[f64], sigma: f64, n: u64, seed: u64) -> Result<McEstimate>
where
    F: FnMut(&[f64]) -> f64,
{
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "monte-carlo estimate needs at least 2 samples, got {n}"
        )));
    }
    if sigma == 0.0 {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "mc_smooth_value".into(),
                detail: format!("f(x) = {v} at x = {x:?}"),
            });
        }
        return Ok(McEstimate {
            value: v,
            std_error: 0.0,
            samples: n,
            seed,
        });
    }
    let mut acc = Welford::new();
    let mut point = vec![0.0; x.len()];
    let mut offset = vec![0.0; x.len()];
    for j in 0..n {
        draw_offset(seed, j, sigma, &mut offset);
        for ((p, &xv), &o) in point.iter_mut().zip(x).zip(&offset) {
            *p = xv + o;
        }
        let v = f(&point);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "mc_smooth_value".into(),
                detail: format!("f = {v} at sample {j}, point {point:?}"),
            });
        }
        acc.push(v);
    }
    Ok(McEstimate {
        value: acc.mean,
        std_error: acc.std_error(),
        samples: n,
        seed,
    })
}

/// Unbiased per-coordinate estimate of the smoothed gradient at `sigma > 0`.
pub fn smooth_grad<F>(
    mut f: F,
    x: &[f64],
    sigma: f64,
    n: u64,
    seed: u64,
    form: GradForm,
) -> Result<Vec<McEstimate>>
where
    F: FnMut(&[f64]) -> f64,
{
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gradient estimator undefined at sigma = {sigma}; needs sigma > 0"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "monte-carlo estimate needs at least 2 samples, got {n}"
        )));
    }
    let d = x.len();
    let baseline = match form {
        GradForm::Moment => 0.0,
        GradForm::Difference => {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: "mc_smooth_grad".into(),
                    detail: format!("f(x) = {v} at x = {x:?}"),
                });
            }
            v
        }
    };
    let mut acc: Vec<Welford> = (0..d).map(|_| Welford::new()).collect();
    let mut point = vec![0.0; d];
    let mut offset = vec![0.0; d];
    // the estimator is stated in kernel coordinates u = offset / sigma
    let two_over_sigma = 2.0 / sigma;
    for j in 0..n {
        draw_offset(seed, j, sigma, &mut offset);
        for ((p, &xv), &o) in point.iter_mut().zip(x).zip(&offset) {
            *p = xv + o;
        }
        let v = f(&point);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "mc_smooth_grad".into(),
                detail: format!("f = {v} at sample {j}, point {point:?}"),
            });
        }
        let w = two_over_sigma * (v - baseline);
        for (a, &o) in acc.iter_mut().zip(&offset) {
            a.push(w * (o / sigma));
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| McEstimate {
            value: a.mean,
            std_error: a.std_error(),
            samples: n,
            seed,
        })
        .collect())
}

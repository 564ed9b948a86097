//! Component objectives: the gradient sources the optimizers draw from.
//!
//! An objective is a finite family `f_1 .. f_K` whose mean is the training
//! loss. Each implementation provides both the smoothed path (gradient of
//! the sigma-smoothed component) and the raw path used by the unsmoothed
//! baseline optimizers.

use crate::error::Result;
use crate::smoothing::bounds::TestFunction;
use crate::smoothing::mc::{self, GradForm};
use std::cell::Cell;

pub trait ComponentObjective {
    fn dim(&self) -> usize;

    fn num_components(&self) -> usize;

    /// Value of the smoothed component `f_{k,sigma}` at `x`.
    fn value(&self, k: usize, x: &[f64], sigma: f64) -> Result<f64>;

    /// Gradient of the smoothed component; returns the loss value.
    fn grad(&self, k: usize, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64>;

    /// Raw (never-smoothed) component gradient; the baseline path.
    fn raw_grad(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<f64>;

    /// Raw component value.
    fn raw_value(&self, k: usize, x: &[f64]) -> Result<f64>;

    /// Mean smoothed gradient over a batch of component indices.
    fn batch_grad(&self, ks: &[usize], x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        average_grads(ks, out, |k, buf| self.grad(k, x, sigma, buf))
    }

    /// Mean raw gradient over a batch of component indices.
    fn raw_batch_grad(&self, ks: &[usize], x: &[f64], out: &mut [f64]) -> Result<f64> {
        average_grads(ks, out, |k, buf| self.raw_grad(k, x, buf))
    }

    /// Full smoothed gradient: mean over every component.
    fn full_grad(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        let ks: Vec<usize> = (0..self.num_components()).collect();
        self.batch_grad(&ks, x, sigma, out)
    }

    /// Full raw gradient: mean over every component.
    fn full_raw_grad(&self, x: &[f64], out: &mut [f64]) -> Result<f64> {
        let ks: Vec<usize> = (0..self.num_components()).collect();
        self.raw_batch_grad(&ks, x, out)
    }
}

fn average_grads<F>(ks: &[usize], out: &mut [f64], mut one: F) -> Result<f64>
where
    F: FnMut(usize, &mut [f64]) -> Result<f64>,
{
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut buf = vec![0.0; out.len()];
    let mut loss = 0.0;
    for &k in ks {
        loss += one(k, &mut buf)?;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += b;
        }
    }
    let inv = 1.0 / ks.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(loss * inv)
}

/// `f_k(x) = 1/2 ||x - c_k||^2`. Smoothing adds `sigma^2 d / 4` to the value
/// and leaves the gradient untouched.
#[derive(Debug, Clone)]
pub struct QuadraticComponents {
    pub centers: Vec<Vec<f64>>,
}

impl QuadraticComponents {
    pub fn new(centers: Vec<Vec<f64>>) -> Self {
        assert!(!centers.is_empty());
        QuadraticComponents { centers }
    }

    /// Mean objective value `f(x) = (1/K) sum_k f_k(x)` (unsmoothed).
    pub fn mean_value(&self, x: &[f64]) -> f64 {
        self.centers
            .iter()
            .map(|c| 0.5 * x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / self.centers.len() as f64
    }
}

impl ComponentObjective for QuadraticComponents {
    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn num_components(&self) -> usize {
        self.centers.len()
    }

    fn value(&self, k: usize, x: &[f64], sigma: f64) -> Result<f64> {
        let raw = self.raw_value(k, x)?;
        Ok(raw + sigma * sigma * self.dim() as f64 / 4.0)
    }

    fn grad(&self, k: usize, x: &[f64], _sigma: f64, out: &mut [f64]) -> Result<f64> {
        self.raw_grad(k, x, out)
    }

    fn raw_grad(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<f64> {
        let c = &self.centers[k];
        for ((o, &xv), &cv) in out.iter_mut().zip(x).zip(c) {
            *o = xv - cv;
        }
        self.raw_value(k, x)
    }

    fn raw_value(&self, k: usize, x: &[f64]) -> Result<f64> {
        let c = &self.centers[k];
        Ok(0.5 * x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }
}

/// Single-component objective backed by a [`TestFunction`]'s closed forms.
#[derive(Debug, Clone)]
pub struct AnalyticFunctionObjective {
    pub tf: TestFunction,
}

impl ComponentObjective for AnalyticFunctionObjective {
    fn dim(&self) -> usize {
        self.tf.dim()
    }

    fn num_components(&self) -> usize {
        1
    }

    fn value(&self, _k: usize, x: &[f64], sigma: f64) -> Result<f64> {
        Ok(self.tf.smoothed_value(x, sigma))
    }

    fn grad(&self, _k: usize, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        out.copy_from_slice(&self.tf.smoothed_grad(x, sigma));
        Ok(self.tf.smoothed_value(x, sigma))
    }

    fn raw_grad(&self, _k: usize, x: &[f64], out: &mut [f64]) -> Result<f64> {
        out.copy_from_slice(&self.tf.grad(x));
        Ok(self.tf.value(x))
    }

    fn raw_value(&self, _k: usize, x: &[f64]) -> Result<f64> {
        Ok(self.tf.value(x))
    }
}

/// Monte-Carlo gradient source: smooths a black-box component family by
/// sampling. Each call consumes a fresh deterministic stream derived from
/// `(seed, call index)`. The smoothed gradient uses the difference form;
/// `sigma = 0` smoothed gradients are undefined and surface as errors.
pub struct McComponents<F>
where
    F: Fn(usize, &[f64]) -> f64,
{
    f: F,
    dim: usize,
    num: usize,
    samples: u64,
    seed: u64,
    calls: Cell<u64>,
}

impl<F> McComponents<F>
where
    F: Fn(usize, &[f64]) -> f64,
{
    pub fn new(f: F, dim: usize, num: usize, samples: u64, seed: u64) -> Self {
        McComponents {
            f,
            dim,
            num,
            samples,
            seed,
            calls: Cell::new(0),
        }
    }

    fn next_stream(&self) -> u64 {
        let c = self.calls.get();
        self.calls.set(c + 1);
        crate::derive_seed(self.seed, "mc-call", c)
    }
}

impl<F> ComponentObjective for McComponents<F>
where
    F: Fn(usize, &[f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_components(&self) -> usize {
        self.num
    }

    fn value(&self, k: usize, x: &[f64], sigma: f64) -> Result<f64> {
        let est = mc::smooth_value(|p| (self.f)(k, p), x, sigma, self.samples, self.next_stream())?;
        Ok(est.value)
    }

    fn grad(&self, k: usize, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        let est = mc::smooth_grad(
            |p| (self.f)(k, p),
            x,
            sigma,
            self.samples,
            self.next_stream(),
            GradForm::Difference,
        )?;
        for (o, e) in out.iter_mut().zip(&est) {
            *o = e.value;
        }
        self.raw_value(k, x)
    }

    fn raw_grad(&self, _k: usize, _x: &[f64], _out: &mut [f64]) -> Result<f64> {
        Err(crate::Error::InvalidArgument(
            "monte-carlo source has no raw gradient; use an analytic objective for baselines"
                .into(),
        ))
    }

    fn raw_value(&self, k: usize, x: &[f64]) -> Result<f64> {
        Ok((self.f)(k, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean over components of the smoothed per-component gradient equals
    /// the smoothed full gradient, exactly in analytic mode.
    #[test]
    fn per_component_gradients_are_unbiased() {
        let centers = vec![
            vec![1.0, -2.0],
            vec![0.5, 0.5],
            vec![-1.5, 3.0],
            vec![2.0, -1.0],
        ];
        let obj = QuadraticComponents::new(centers.clone());
        let x = [0.3, 0.7];
        let mut mean = [0.0; 2];
        let mut buf = vec![0.0; 2];
        for k in 0..obj.num_components() {
            obj.grad(k, &x, 0.4, &mut buf).unwrap();
            for (m, b) in mean.iter_mut().zip(&buf) {
                *m += b;
            }
        }
        mean.iter_mut().for_each(|v| *v /= 4.0);
        // full smoothed gradient of the mean quadratic: x - mean(c)
        let mut full = vec![0.0; 2];
        obj.full_grad(&x, 0.4, &mut full).unwrap();
        for (m, f) in mean.iter().zip(&full) {
            assert!((m - f).abs() < 1e-15);
        }
    }

    #[test]
    fn mc_source_gradient_agrees_with_closed_form() {
        let obj = McComponents::new(
            |_k, p: &[f64]| p.iter().map(|v| v * v).sum::<f64>(),
            2,
            1,
            200_000,
            77,
        );
        let mut g = vec![0.0; 2];
        obj.grad(0, &[1.0, -0.5], 0.3, &mut g).unwrap();
        // smoothed quadratic keeps gradient 2x
        assert!((g[0] - 2.0).abs() < 0.05, "{g:?}");
        assert!((g[1] + 1.0).abs() < 0.05, "{g:?}");
    }

    #[test]
    fn mc_source_sigma_zero_grad_errors() {
        let obj = McComponents::new(|_, p: &[f64]| p[0], 1, 1, 100, 1);
        let mut g = vec![0.0];
        assert!(obj.grad(0, &[0.0], 0.0, &mut g).is_err());
    }
}

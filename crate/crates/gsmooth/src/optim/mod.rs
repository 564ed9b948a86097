//! Stochastic optimizers: SGD, SVRG, Adam, and their Gaussian-smoothed
//! counterparts.
//!
//! Each smoothed optimizer replaces the per-component gradient by the
//! gradient of the sigma-smoothed component, where sigma follows a
//! [`SigmaSchedule`]. The unsmoothed baselines share the update arithmetic
//! but route through the objective's raw-gradient path, so a `sigma == 0`
//! schedule must reproduce the baseline trajectory bit for bit under a
//! shared sampling seed.

pub mod objective;
pub mod schedule;

pub use objective::{
    AnalyticFunctionObjective, ComponentObjective, McComponents, QuadraticComponents,
};
pub use schedule::SigmaSchedule;

use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Per-step observation returned by every optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based step index local to the optimizer.
    pub step: usize,
    /// Sigma used for this step; `None` on the raw (unsmoothed) path.
    pub sigma: Option<f64>,
    /// Mini-batch loss at the pre-update iterate.
    pub loss: f64,
    /// `||x_t - x_{t-1}||`.
    pub update_norm: f64,
}

/// Seeded stream of uniform component indices, shared between smoothed and
/// unsmoothed runs so their sampling sequences coincide.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    rng: ChaCha8Rng,
}

impl IndexSampler {
    pub fn new(seed: u64) -> Self {
        IndexSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self, k: usize) -> usize {
        self.rng.gen_range(0..k)
    }

    pub fn draw_batch(&mut self, k: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.draw(k)).collect()
    }
}

/// Scalar per-step sequence for Adam's `eta_t`, `beta_t`, `theta_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Sequence {
    Constant(f64),
    Explicit { values: Vec<f64>, repeat_last: bool },
}

impl Sequence {
    pub fn at(&self, t: usize) -> Result<f64> {
        match self {
            Sequence::Constant(v) => Ok(*v),
            Sequence::Explicit {
                values,
                repeat_last,
            } => {
                if t >= 1 && t <= values.len() {
                    Ok(values[t - 1])
                } else if *repeat_last && !values.is_empty() {
                    Ok(*values.last().unwrap())
                } else {
                    Err(Error::ScheduleExhausted {
                        t,
                        len: values.len(),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum GradPath {
    Raw,
    Smoothed(SigmaSchedule),
}

impl GradPath {
    fn sigma_at(&self, t: usize) -> Result<Option<f64>> {
        match self {
            GradPath::Raw => Ok(None),
            GradPath::Smoothed(s) => s.value_at(t).map(Some),
        }
    }
}

fn batch_gradient<O: ComponentObjective>(
    obj: &O,
    ks: &[usize],
    x: &[f64],
    sigma: Option<f64>,
    out: &mut [f64],
    step: usize,
) -> Result<f64> {
    let r = match sigma {
        None => obj.raw_batch_grad(ks, x, out),
        Some(s) => obj.batch_grad(ks, x, s, out),
    };
    r.map_err(|e| step_context(e, step))
}

fn step_context(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::NonFinite {
            op,
            detail: format!("{detail} (at optimizer step {step})"),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// SGD family
// ---------------------------------------------------------------------------

struct SgdCore {
    path: GradPath,
    learning_rate: f64,
    batch_size: usize,
    sampler: IndexSampler,
    t: usize,
    grad: Vec<f64>,
}

impl SgdCore {
    fn new(path: GradPath, learning_rate: f64, batch_size: usize, sampling_seed: u64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!(batch_size >= 1, "batch size must be at least 1");
        SgdCore {
            path,
            learning_rate,
            batch_size,
            sampler: IndexSampler::new(sampling_seed),
            t: 0,
            grad: Vec::new(),
        }
    }

    fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.t += 1;
        let sigma = self.path.sigma_at(self.t)?;
        let ks = self.sampler.draw_batch(obj.num_components(), self.batch_size);
        self.grad.resize(x.len(), 0.0);
        let loss = batch_gradient(obj, &ks, x, sigma, &mut self.grad, self.t)?;
        let mut norm_sq = 0.0;
        for (xi, g) in x.iter_mut().zip(&self.grad) {
            let dx = self.learning_rate * g;
            *xi -= dx;
            norm_sq += dx * dx;
        }
        Ok(StepInfo {
            step: self.t,
            sigma,
            loss,
            update_norm: norm_sq.sqrt(),
        })
    }
}

/// Plain stochastic gradient descent over the raw component gradients.
pub struct Sgd(SgdCore);

impl Sgd {
    pub fn new(learning_rate: f64, batch_size: usize, sampling_seed: u64) -> Self {
        Sgd(SgdCore::new(
            GradPath::Raw,
            learning_rate,
            batch_size,
            sampling_seed,
        ))
    }

    pub fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.0.step(obj, x)
    }
}

/// SGD over the sigma-smoothed component gradients.
pub struct GsmoothSgd(SgdCore);

impl GsmoothSgd {
    pub fn new(
        schedule: SigmaSchedule,
        learning_rate: f64,
        batch_size: usize,
        sampling_seed: u64,
    ) -> Self {
        GsmoothSgd(SgdCore::new(
            GradPath::Smoothed(schedule),
            learning_rate,
            batch_size,
            sampling_seed,
        ))
    }

    pub fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.0.step(obj, x)
    }
}

// ---------------------------------------------------------------------------
// Adam family
// ---------------------------------------------------------------------------

/// Adam hyperparameters. The update follows the momentum/variance recursion
/// with epsilon inside the square root and no bias correction.
#[derive(Debug, Clone)]
pub struct AdamParams {
    pub step_size: Sequence,
    pub beta: Sequence,
    pub theta: Sequence,
    pub epsilon: f64,
}

impl AdamParams {
    /// Defaults matching the experiment setup: beta 0.9, theta 0.999,
    /// epsilon 1e-7.
    pub fn with_step_size(eta: f64) -> Self {
        AdamParams {
            step_size: Sequence::Constant(eta),
            beta: Sequence::Constant(0.9),
            theta: Sequence::Constant(0.999),
            epsilon: 1e-7,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

struct AdamCore {
    path: GradPath,
    params: AdamParams,
    batch_size: usize,
    sampler: IndexSampler,
    state: AdamState,
    grad: Vec<f64>,
}

impl AdamCore {
    fn new(
        path: GradPath,
        params: AdamParams,
        dim: usize,
        batch_size: usize,
        sampling_seed: u64,
    ) -> Self {
        assert!(params.epsilon >= 0.0);
        assert!(batch_size >= 1);
        AdamCore {
            path,
            params,
            batch_size,
            sampler: IndexSampler::new(sampling_seed),
            state: AdamState::new(dim),
            grad: vec![0.0; dim],
        }
    }

    #[allow(clippy::needless_range_loop)] // four buffers advance in lockstep
    fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.state.t += 1;
        let t = self.state.t;
        let sigma = self.path.sigma_at(t)?;
        let eta = self.params.step_size.at(t)?;
        let beta = self.params.beta.at(t)?;
        let theta = self.params.theta.at(t)?;
        if !(0.0..1.0).contains(&beta) || !(0.0..1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!(
                "adam decay rates must lie in [0,1), got beta={beta}, theta={theta}"
            )));
        }
        if eta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adam step size must be positive, got {eta}"
            )));
        }
        let ks = self.sampler.draw_batch(obj.num_components(), self.batch_size);
        let loss = batch_gradient(obj, &ks, x, sigma, &mut self.grad, t)?;
        let eps = self.params.epsilon;
        let mut norm_sq = 0.0;
        for i in 0..x.len() {
            let g = self.grad[i];
            self.state.m[i] = beta * self.state.m[i] + (1.0 - beta) * g;
            self.state.v[i] = theta * self.state.v[i] + (1.0 - theta) * g * g;
            let denom = (self.state.v[i] + eps).sqrt();
            if denom == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "adam update divides by zero at coordinate {i} (epsilon=0, v=0) at step {t}"
                )));
            }
            let dx = eta * self.state.m[i] / denom;
            x[i] -= dx;
            norm_sq += dx * dx;
        }
        Ok(StepInfo {
            step: t,
            sigma,
            loss,
            update_norm: norm_sq.sqrt(),
        })
    }
}

/// Adam over raw component gradients (no bias correction).
pub struct Adam(AdamCore);

impl Adam {
    pub fn new(params: AdamParams, dim: usize, batch_size: usize, sampling_seed: u64) -> Self {
        Adam(AdamCore::new(
            GradPath::Raw,
            params,
            dim,
            batch_size,
            sampling_seed,
        ))
    }

    pub fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.0.step(obj, x)
    }

    pub fn state(&self) -> &AdamState {
        &self.0.state
    }
}

/// Adam over sigma-smoothed component gradients.
pub struct GsmoothAdam(AdamCore);

impl GsmoothAdam {
    pub fn new(
        schedule: SigmaSchedule,
        params: AdamParams,
        dim: usize,
        batch_size: usize,
        sampling_seed: u64,
    ) -> Self {
        GsmoothAdam(AdamCore::new(
            GradPath::Smoothed(schedule),
            params,
            dim,
            batch_size,
            sampling_seed,
        ))
    }

    pub fn step<O: ComponentObjective>(&mut self, obj: &O, x: &mut [f64]) -> Result<StepInfo> {
        self.0.step(obj, x)
    }

    pub fn state(&self) -> &AdamState {
        &self.0.state
    }
}

// ---------------------------------------------------------------------------
// SVRG family
// ---------------------------------------------------------------------------

/// Smoothing scale for the control variate and snapshot gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauRule {
    /// `tau = sigma_s`: control variate smoothed at the outer scale.
    SnapshotSigma,
    /// `tau = 0`: control variate over the raw gradients.
    Zero,
}

/// How the next snapshot is chosen after an inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotRule {
    /// A uniformly random inner iterate (index in `{0, .., m-1}`), matching
    /// the convergence analysis.
    UniformIterate,
    /// The last inner iterate — the practical variant; keeps multi-round
    /// runs monotone instead of rolling back half an inner loop on average.
    LastIterate,
}

#[derive(Debug, Clone)]
pub struct SvrgConfig {
    pub learning_rate: f64,
    /// Inner loop length `m`.
    pub inner_steps: usize,
    pub tau_rule: TauRule,
    pub snapshot_rule: SnapshotRule,
}

struct SvrgCore {
    path: GradPath,
    config: SvrgConfig,
    sampler: IndexSampler,
    s: usize,
}

impl SvrgCore {
    fn new(path: GradPath, config: SvrgConfig, sampling_seed: u64) -> Self {
        assert!(config.learning_rate > 0.0);
        assert!(config.inner_steps >= 1);
        SvrgCore {
            path,
            config,
            sampler: IndexSampler::new(sampling_seed),
            s: 0,
        }
    }

    /// One outer iteration: recompute the control variate at the snapshot,
    /// run `m` inner steps, and replace the snapshot by a uniformly chosen
    /// inner iterate (index drawn from `{0, .., m-1}`).
    fn run_outer<O: ComponentObjective>(
        &mut self,
        obj: &O,
        snapshot: &mut Vec<f64>,
    ) -> Result<Vec<StepInfo>> {
        self.s += 1;
        let sigma = self.path.sigma_at(self.s)?;
        let tau = sigma.map(|s| match self.config.tau_rule {
            TauRule::SnapshotSigma => s,
            TauRule::Zero => 0.0,
        });
        let k = obj.num_components();
        let m = self.config.inner_steps;
        let eta = self.config.learning_rate;
        let dim = snapshot.len();

        // control variate: full gradient at the snapshot, smoothed at tau
        let mut mu = vec![0.0; dim];
        match tau {
            None => obj.full_raw_grad(snapshot, &mut mu)?,
            Some(t) => obj.full_grad(snapshot, t, &mut mu)?,
        };

        // pick == m selects the final iterate; the loop below captures x_t
        // when t reaches pick, so both rules share one code path
        let pick = match self.config.snapshot_rule {
            SnapshotRule::UniformIterate => self.sampler.draw(m),
            SnapshotRule::LastIterate => m,
        };
        let mut x = snapshot.clone();
        let mut chosen = x.clone(); // pick == 0 keeps the old snapshot
        let mut g_cur = vec![0.0; dim];
        let mut g_snap = vec![0.0; dim];
        let mut records = Vec::with_capacity(m);

        for t in 1..=m {
            let i = self.sampler.draw(k);
            let loss = match sigma {
                None => obj.raw_grad(i, &x, &mut g_cur),
                Some(s) => obj.grad(i, &x, s, &mut g_cur),
            }
            .map_err(|e| step_context(e, t))?;
            match tau {
                None => obj.raw_grad(i, snapshot, &mut g_snap),
                Some(tv) => obj.grad(i, snapshot, tv, &mut g_snap),
            }
            .map_err(|e| step_context(e, t))?;

            let mut norm_sq = 0.0;
            for j in 0..dim {
                let v = g_cur[j] - g_snap[j] + mu[j];
                let dx = eta * v;
                x[j] -= dx;
                norm_sq += dx * dx;
            }
            if t == pick {
                chosen.copy_from_slice(&x);
            }
            records.push(StepInfo {
                step: t,
                sigma,
                loss,
                update_norm: norm_sq.sqrt(),
            });
        }
        *snapshot = chosen;
        Ok(records)
    }
}

/// SVRG over raw component gradients.
pub struct Svrg(SvrgCore);

impl Svrg {
    pub fn new(config: SvrgConfig, sampling_seed: u64) -> Self {
        Svrg(SvrgCore::new(GradPath::Raw, config, sampling_seed))
    }

    pub fn run_outer<O: ComponentObjective>(
        &mut self,
        obj: &O,
        snapshot: &mut Vec<f64>,
    ) -> Result<Vec<StepInfo>> {
        self.0.run_outer(obj, snapshot)
    }
}

/// SVRG with sigma-smoothed gradients and a tau-smoothed control variate.
pub struct GsmoothSvrg(SvrgCore);

impl GsmoothSvrg {
    pub fn new(schedule: SigmaSchedule, config: SvrgConfig, sampling_seed: u64) -> Self {
        GsmoothSvrg(SvrgCore::new(
            GradPath::Smoothed(schedule),
            config,
            sampling_seed,
        ))
    }

    pub fn run_outer<O: ComponentObjective>(
        &mut self,
        obj: &O,
        snapshot: &mut Vec<f64>,
    ) -> Result<Vec<StepInfo>> {
        self.0.run_outer(obj, snapshot)
    }
}

//! Experiment execution: per-cell training, grid orchestration, CSV output.

use crate::config::{EvalTest, ExperimentConfig, OptimizerKind, SnapshotRuleKind, TauRuleKind};
use anyhow::{bail, Context};
use gsmooth::data::{load_dir, synth, TestSet, TrainSet};
use gsmooth::derive_seed;
use gsmooth::layers::{DatasetObjective, Network};
use gsmooth::optim::{
    Adam, AdamParams, GsmoothAdam, GsmoothSgd, GsmoothSvrg, Sequence, Sgd, SnapshotRule,
    StepInfo, Svrg, SvrgConfig, TauRule,
};
use gsmooth::Error as GsError;
use std::fmt::Write as _;
use std::path::Path;

/// One training-step observation, as written to the per-cell CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub update_norm: f64,
    pub test_accuracy: Option<f64>,
}

/// One grid cell: a noise setting, a sigma, and a seed replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub pixel_std: f64,
    pub label_flip: f64,
    pub sigma: f64,
    pub replicate: u64,
    /// Index of the (pixel_std, label_flip, replicate) family; sigma-values
    /// inside a family share initialization and sampling streams.
    pub family: u64,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: CellSpec,
    pub records: Vec<RunRecord>,
    pub final_test_accuracy: Option<f64>,
    pub update_norm_std: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub diverged: bool,
}

impl CellResult {
    pub fn file_name(&self) -> String {
        format!(
            "cell_px{}_lf{}_sigma{}_rep{}.csv",
            self.cell.pixel_std, self.cell.label_flip, self.cell.sigma, self.cell.replicate
        )
    }
}

/// Enumerates the grid in deterministic order: noise cells x replicates form
/// families; each family sweeps every sigma.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    let mut family = 0u64;
    for &pixel_std in &cfg.noise.pixel_std {
        for &label_flip in &cfg.noise.label_flip {
            for replicate in 0..cfg.seeds.replicates {
                for &sigma in &cfg.experiment.sigmas {
                    cells.push(CellSpec {
                        pixel_std,
                        label_flip,
                        sigma,
                        replicate,
                        family,
                    });
                }
                family += 1;
            }
        }
    }
    cells
}

/// Loaded, noised, split data for one cell family.
pub struct CellData {
    pub train_images: Vec<f64>,
    pub train_labels: Vec<u8>,
    pub val_images: Vec<f64>,
    pub val_labels: Vec<u8>,
    pub test_images: Vec<f64>,
    pub test_labels: Vec<u8>,
}

pub fn prepare_cell_data(
    cfg: &ExperimentConfig,
    base_train: &TrainSet,
    test: &TestSet,
    cell: &CellSpec,
) -> anyhow::Result<CellData> {
    let data_seed = cfg.seeds.data;
    let noised = base_train
        .with_pixel_noise(cell.pixel_std, derive_seed(data_seed, "pixel", cell.family))?
        .with_flipped_labels(cell.label_flip, derive_seed(data_seed, "flip", cell.family))?;
    let (train, val) = noised.split_validation(
        cfg.dataset.validation_fraction,
        derive_seed(data_seed, "val-split", cell.family),
    )?;
    Ok(CellData {
        train_images: train.images().to_vec(),
        train_labels: train.labels().to_vec(),
        val_images: val.images().to_vec(),
        val_labels: val.labels().to_vec(),
        test_images: test.images().to_vec(),
        test_labels: test.labels().to_vec(),
    })
}

struct EarlyStopper {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss; true means stop now.
    fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.patience > 0 && self.stale >= self.patience
        }
    }
}

enum CellOptimizer {
    Sgd(Sgd),
    GsmoothSgd(GsmoothSgd),
    Adam(Adam),
    GsmoothAdam(GsmoothAdam),
    Svrg(Svrg),
    GsmoothSvrg(GsmoothSvrg),
}

fn build_optimizer(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    dim: usize,
    sampling_seed: u64,
) -> anyhow::Result<CellOptimizer> {
    let kind = cfg.experiment.optimizer;
    let eta = cfg.experiment.learning_rate;
    let batch = cfg.experiment.batch_size;
    let schedule = cfg.schedule.build(cell.sigma)?;
    let adam_params = AdamParams {
        step_size: Sequence::Constant(eta),
        beta: Sequence::Constant(cfg.adam.beta),
        theta: Sequence::Constant(cfg.adam.theta),
        epsilon: cfg.adam.epsilon,
    };
    let svrg_config = SvrgConfig {
        learning_rate: eta,
        inner_steps: cfg.svrg.inner_steps,
        tau_rule: match cfg.svrg.tau_rule {
            TauRuleKind::SnapshotSigma => TauRule::SnapshotSigma,
            TauRuleKind::Zero => TauRule::Zero,
        },
        snapshot_rule: match cfg.svrg.snapshot_rule {
            SnapshotRuleKind::UniformIterate => SnapshotRule::UniformIterate,
            SnapshotRuleKind::LastIterate => SnapshotRule::LastIterate,
        },
    };
    Ok(match kind {
        OptimizerKind::Sgd => CellOptimizer::Sgd(Sgd::new(eta, batch, sampling_seed)),
        OptimizerKind::GsmoothSgd => {
            CellOptimizer::GsmoothSgd(GsmoothSgd::new(schedule, eta, batch, sampling_seed))
        }
        OptimizerKind::Adam => {
            CellOptimizer::Adam(Adam::new(adam_params, dim, batch, sampling_seed))
        }
        OptimizerKind::GsmoothAdam => CellOptimizer::GsmoothAdam(GsmoothAdam::new(
            schedule,
            adam_params,
            dim,
            batch,
            sampling_seed,
        )),
        OptimizerKind::Svrg => CellOptimizer::Svrg(Svrg::new(svrg_config, sampling_seed)),
        OptimizerKind::GsmoothSvrg => {
            CellOptimizer::GsmoothSvrg(GsmoothSvrg::new(schedule, svrg_config, sampling_seed))
        }
    })
}

fn is_divergence(err: &GsError) -> bool {
    matches!(err, GsError::NonFinite { .. })
}

/// Trains one grid cell to completion (max epochs, early stop, or
/// divergence) and gathers its records.
pub fn train_cell(
    cfg: &ExperimentConfig,
    network: &Network,
    data: &CellData,
    cell: &CellSpec,
) -> anyhow::Result<CellResult> {
    let objective = DatasetObjective::new(network, &data.train_images, &data.train_labels)?;
    let mut params = network.init_params(derive_seed(cfg.seeds.init, "init", cell.family));
    let sampling_seed = derive_seed(cfg.seeds.sampling, "sample", cell.family);
    let mut optimizer = build_optimizer(cfg, cell, network.param_count(), sampling_seed)?;

    // advisory check of the smoothed-Adam step-size condition
    if cfg.experiment.optimizer == OptimizerKind::GsmoothAdam {
        let schedule = cfg.schedule.build(cell.sigma)?;
        let horizon = cfg.experiment.max_epochs
            * data.train_labels.len().div_ceil(cfg.experiment.batch_size)
            + 1;
        let eta = cfg.experiment.learning_rate;
        let bad = schedule.adam_condition_warnings(|_| eta, horizon.min(100_000));
        if !bad.is_empty() {
            eprintln!(
                "warning: sigma schedule moves faster than the step size allows at {} of the first {} steps (smoothed-Adam convergence condition)",
                bad.len(),
                horizon.min(100_000)
            );
        }
    }

    let kind = cfg.experiment.optimizer;
    let n_train = data.train_labels.len();
    let steps_per_epoch = if kind.is_svrg() {
        cfg.svrg.inner_steps
    } else {
        n_train.div_ceil(cfg.experiment.batch_size)
    };

    let mut records: Vec<RunRecord> = Vec::new();
    let mut stopper = EarlyStopper::new(cfg.experiment.patience);
    let mut diverged = false;
    let mut last_sigma = if kind.is_smoothed() { Some(cell.sigma) } else { None };
    let mut global_step = 0u64;
    let mut epochs_run = 0usize;

    'training: for epoch in 1..=cfg.experiment.max_epochs {
        epochs_run = epoch;
        let epoch_infos: Vec<StepInfo> = match &mut optimizer {
            CellOptimizer::Svrg(o) => match o.run_outer(&objective, &mut params) {
                Ok(infos) => infos,
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            },
            CellOptimizer::GsmoothSvrg(o) => match o.run_outer(&objective, &mut params) {
                Ok(infos) => infos,
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            },
            _ => {
                let mut infos = Vec::with_capacity(steps_per_epoch);
                for _ in 0..steps_per_epoch {
                    let step = match &mut optimizer {
                        CellOptimizer::Sgd(o) => o.step(&objective, &mut params),
                        CellOptimizer::GsmoothSgd(o) => o.step(&objective, &mut params),
                        CellOptimizer::Adam(o) => o.step(&objective, &mut params),
                        CellOptimizer::GsmoothAdam(o) => o.step(&objective, &mut params),
                        _ => unreachable!(),
                    };
                    match step {
                        Ok(info) => infos.push(info),
                        Err(e) if is_divergence(&e) => {
                            diverged = true;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                infos
            }
        };

        for info in &epoch_infos {
            global_step += 1;
            if info.sigma.is_some() {
                last_sigma = info.sigma;
            }
            records.push(RunRecord {
                step: global_step,
                epoch: epoch as u64,
                train_loss: info.loss,
                update_norm: info.update_norm,
                test_accuracy: None,
            });
        }
        if diverged {
            break 'training;
        }

        // per-epoch evaluation at the sigma the run is currently using
        let eval_sigma = if kind.is_smoothed() { last_sigma } else { None };
        if cfg.experiment.eval_test == EvalTest::Epoch {
            let acc =
                network.accuracy(&params, &data.test_images, &data.test_labels, eval_sigma)?;
            if let Some(last) = records.last_mut() {
                last.test_accuracy = Some(acc);
            }
        }
        // early stopping on validation loss (skipped for an empty split)
        if !data.val_labels.is_empty() {
            let val_loss = network.dataset_loss(
                &params,
                &data.val_images,
                &data.val_labels,
                eval_sigma,
            );
            let val_loss = match val_loss {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e.into()),
            };
            if stopper.observe(val_loss) {
                break 'training;
            }
        }
    }

    let mut final_test_accuracy = if diverged {
        Some(0.0)
    } else {
        match cfg.experiment.eval_test {
            EvalTest::Epoch => records.iter().rev().find_map(|r| r.test_accuracy),
            EvalTest::Final => {
                let eval_sigma = if kind.is_smoothed() { last_sigma } else { None };
                match network.accuracy(&params, &data.test_images, &data.test_labels, eval_sigma)
                {
                    Ok(acc) => Some(acc),
                    Err(e) if is_divergence(&e) => {
                        diverged = true;
                        None
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            EvalTest::Off => None,
        }
    };
    if diverged {
        final_test_accuracy = Some(0.0);
    }
    let norms: Vec<f64> = records.iter().map(|r| r.update_norm).collect();
    Ok(CellResult {
        cell: *cell,
        update_norm_std: sample_std(&norms),
        final_train_loss: records.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        final_test_accuracy,
        epochs_run,
        records,
        diverged,
    })
}

/// Unbiased sample standard deviation (zero for fewer than two points).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("step,epoch,train_loss,update_norm,test_accuracy\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.epoch,
            r.train_loss,
            r.update_norm,
            fmt_opt(r.test_accuracy)
        );
    }
    out
}

pub const SUMMARY_HEADER: &str =
    "optimizer,pixel_std,label_flip,sigma,replicate,test_accuracy,update_norm_std,final_train_loss,epochs_run,diverged";

pub fn summary_to_csv(optimizer: OptimizerKind, results: &[CellResult]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            optimizer.name(),
            r.cell.pixel_std,
            r.cell.label_flip,
            r.cell.sigma,
            r.cell.replicate,
            fmt_opt(r.final_test_accuracy),
            r.update_norm_std,
            r.final_train_loss,
            r.epochs_run,
            r.diverged
        );
    }
    out
}

/// Runs the whole grid, writing one CSV per cell plus `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, quiet: bool) -> anyhow::Result<Vec<CellResult>> {
    let data_dir = cfg.dataset.resolved_dir();
    let (train, test) = load_dir(
        &data_dir,
        cfg.dataset.train_limit,
        cfg.dataset.test_limit,
    )
    .with_context(|| format!("loading dataset from {}", data_dir.display()))?;
    let network = Network::new(cfg.network_config()?)?;
    std::fs::create_dir_all(&cfg.output.dir)?;

    let cells = enumerate_cells(cfg);
    let mut results = Vec::with_capacity(cells.len());
    let mut family_cache: Option<(u64, CellData)> = None;
    for cell in &cells {
        let fresh = !matches!(&family_cache, Some((f, _)) if *f == cell.family);
        if fresh {
            family_cache = Some((cell.family, prepare_cell_data(cfg, &train, &test, cell)?));
        }
        let data = &family_cache.as_ref().unwrap().1;
        let result = train_cell(cfg, &network, data, cell)?;
        if !quiet {
            eprintln!(
                "cell px={} lf={} sigma={} rep={}: acc={} update_std={} epochs={}{}",
                cell.pixel_std,
                cell.label_flip,
                cell.sigma,
                cell.replicate,
                fmt_opt(result.final_test_accuracy),
                result.update_norm_std,
                result.epochs_run,
                if result.diverged { " DIVERGED" } else { "" }
            );
        }
        let path = cfg.output.dir.join(result.file_name());
        std::fs::write(&path, records_to_csv(&result.records))?;
        results.push(result);
    }
    std::fs::write(
        cfg.output.dir.join("summary.csv"),
        summary_to_csv(cfg.experiment.optimizer, &results),
    )?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// Heatmap aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMetric {
    Accuracy,
    UpdateNormStd,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub optimizer: String,
    pub pixel_std: f64,
    pub label_flip: f64,
    pub sigma: f64,
    pub replicate: u64,
    pub test_accuracy: Option<f64>,
    pub update_norm_std: f64,
}

pub fn parse_summary(text: &str) -> anyhow::Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty summary csv")?;
    if header != SUMMARY_HEADER {
        bail!("unexpected summary header: {header}");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            bail!("summary line {} has {} fields", i + 2, f.len());
        }
        rows.push(SummaryRow {
            optimizer: f[0].to_string(),
            pixel_std: f[1].parse()?,
            label_flip: f[2].parse()?,
            sigma: f[3].parse()?,
            replicate: f[4].parse()?,
            test_accuracy: if f[5].is_empty() {
                None
            } else {
                Some(f[5].parse()?)
            },
            update_norm_std: f[6].parse()?,
        });
    }
    Ok(rows)
}

/// Builds the gnuplot-style matrix: rows are sorted pixel-noise levels,
/// columns sorted label-flip fractions, each value averaged over replicates.
/// Every (row, column) cell must be present.
pub fn heatmap_table(
    rows: &[SummaryRow],
    metric: HeatmapMetric,
    sigma: Option<f64>,
) -> anyhow::Result<String> {
    let filtered: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| sigma.is_none_or(|s| r.sigma == s))
        .collect();
    if filtered.is_empty() {
        bail!("no summary rows match the requested sigma");
    }
    let sigmas: Vec<f64> = dedup_sorted(filtered.iter().map(|r| r.sigma));
    if sigmas.len() > 1 {
        bail!(
            "summary contains {} sigma values ({:?}); pick one with --sigma",
            sigmas.len(),
            sigmas
        );
    }
    let pixel: Vec<f64> = dedup_sorted(filtered.iter().map(|r| r.pixel_std));
    let flip: Vec<f64> = dedup_sorted(filtered.iter().map(|r| r.label_flip));
    let mut missing = Vec::new();
    let mut out = String::from("pixel_std\\label_flip");
    for f in &flip {
        let _ = write!(out, ",{f}");
    }
    out.push('\n');
    for p in &pixel {
        let _ = write!(out, "{p}");
        for f in &flip {
            let vals: Vec<f64> = filtered
                .iter()
                .filter(|r| r.pixel_std == *p && r.label_flip == *f)
                .filter_map(|r| match metric {
                    HeatmapMetric::Accuracy => r.test_accuracy,
                    HeatmapMetric::UpdateNormStd => Some(r.update_norm_std),
                })
                .collect();
            if vals.is_empty() {
                missing.push((*p, *f));
                let _ = write!(out, ",");
            } else {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let _ = write!(out, ",{mean}");
            }
        }
        out.push('\n');
    }
    if !missing.is_empty() {
        bail!("heatmap grid incomplete; missing cells: {missing:?}");
    }
    Ok(out)
}

fn dedup_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

// ---------------------------------------------------------------------------
// Smoothing demo and bound checks
// ---------------------------------------------------------------------------

use gsmooth::smoothing::bounds::{
    check_composition, check_grad_gap_bound_with_l, check_grad_norm_bound_with_l,
    check_value_bound_with_l, BoundReport, TestFunction,
};
use gsmooth::smoothing::mc;

pub fn parse_test_function(name: &str) -> anyhow::Result<TestFunction> {
    match name {
        "quartic" => Ok(TestFunction::quartic()),
        "quadratic" => Ok(TestFunction::quadratic(1)),
        other => bail!("unknown test function `{other}` (quartic|quadratic)"),
    }
}

/// Closed form, Monte-Carlo estimate, and error columns for plotting the
/// smoothing transform of a test function.
pub fn smooth_demo_csv(
    tf: &TestFunction,
    sigmas: &[f64],
    range: (f64, f64),
    points: usize,
    samples: u64,
    seed: u64,
) -> anyhow::Result<String> {
    let mut out = String::from("sigma,x,f,f_sigma_closed,f_sigma_mc,mc_std_error\n");
    let grid = tf.grid(range.0, range.1, points);
    for &sigma in sigmas {
        for p in &grid {
            let f = tf.value(p);
            let closed = tf.smoothed_value(p, sigma);
            let est = mc::smooth_value(|y| tf.value(y), p, sigma, samples, seed)?;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                sigma, p[0], f, closed, est.value, est.std_error
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LemmaKind {
    ValueGap,      // |f_tau - f_sigma| bound
    GradNorm,      // smoothed gradient norm bound
    GradGap,       // gradient difference bound
    Composition,   // (f_sigma)_eta = f_tau
}

impl LemmaKind {
    pub fn parse(name: &str) -> anyhow::Result<Self> {
        Ok(match name {
            "1d" | "value-gap" => LemmaKind::ValueGap,
            "2a" | "grad-norm" => LemmaKind::GradNorm,
            "2b" | "grad-gap" => LemmaKind::GradGap,
            "composition" => LemmaKind::Composition,
            other => bail!("unknown lemma `{other}` (1d|2a|2b|composition)"),
        })
    }
}

pub struct LemmaOutcome {
    pub csv: String,
    pub violations: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn lemma_check(
    kind: LemmaKind,
    tf: &TestFunction,
    sigmas: &[f64],
    taus: &[f64],
    range: (f64, f64),
    points: usize,
    samples: u64,
    seed: u64,
    lipschitz: Option<f64>,
) -> anyhow::Result<LemmaOutcome> {
    let grid = tf.grid(range.0, range.1, points);
    let l = lipschitz.unwrap_or_else(|| tf.lipschitz());
    let mut out = String::from("lemma,sigma,tau,x,observed,bound,margin,violated\n");
    let mut violations = 0usize;
    let mut push = |report: &BoundReport, sigma: f64, tau: f64, out: &mut String| {
        for c in &report.checks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                report.name,
                sigma,
                tau,
                c.point[0],
                c.observed,
                c.bound,
                c.margin(),
                c.violated()
            );
        }
        violations += report.violations();
    };
    match kind {
        LemmaKind::ValueGap => {
            for &s in sigmas {
                for &t in taus {
                    if t < s {
                        continue;
                    }
                    let r = check_value_bound_with_l(tf, l, s, t, &grid)?;
                    push(&r, s, t, &mut out);
                }
            }
        }
        LemmaKind::GradNorm => {
            for &s in sigmas {
                let r = check_grad_norm_bound_with_l(tf, l, s, &grid)?;
                push(&r, s, f64::NAN, &mut out);
            }
        }
        LemmaKind::GradGap => {
            for &s in sigmas {
                for &t in taus {
                    if t < s {
                        continue;
                    }
                    let r = check_grad_gap_bound_with_l(tf, l, s, t, &grid)?;
                    push(&r, s, t, &mut out);
                }
            }
        }
        LemmaKind::Composition => {
            for &s in sigmas {
                for &t in taus {
                    if t <= s {
                        continue;
                    }
                    let eta = (t * t - s * s).sqrt();
                    let r = check_composition(tf, s, eta, &grid, samples, seed)?;
                    push(&r, s, t, &mut out);
                }
            }
        }
    }
    Ok(LemmaOutcome {
        csv: out,
        violations,
    })
}

/// Writes the synthetic stand-in corpus with MNIST file names.
pub fn synth_data(dir: &Path, train: usize, test: usize, seed: u64) -> anyhow::Result<()> {
    synth::generate_into(dir, train, test, seed)?;
    Ok(())
}

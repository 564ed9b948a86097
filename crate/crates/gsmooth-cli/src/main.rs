//! Benchmark CLI: experiment grids, heatmaps, smoothing demos, bound checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 bound violation, 3 I/O error.

use clap::{Parser, Subcommand};
use gsmooth_cli::config::ExperimentConfig;
use gsmooth_cli::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gsmooth", version, about = "Gaussian-smoothed optimizer benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a TOML config.
    Train {
        config: PathBuf,
        /// Suppress per-cell progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Aggregate a summary CSV into a noise-grid matrix.
    Heatmap {
        /// Directory containing summary.csv, or a summary file itself.
        path: PathBuf,
        /// accuracy | update-norm-std
        #[arg(long, default_value = "accuracy")]
        metric: String,
        /// Select one sigma when the summary holds several.
        #[arg(long)]
        sigma: Option<f64>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate a test function, its closed-form smoothing, and the
    /// Monte-Carlo estimate.
    SmoothDemo {
        /// quartic | quadratic
        #[arg(long, default_value = "quartic")]
        function: String,
        /// Comma-separated sigma list.
        #[arg(long, default_value = "0,0.1,0.5,1", value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = -2.0)]
        min: f64,
        #[arg(long, default_value_t = 2.0)]
        max: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a smoothing inequality over a sigma/tau grid; exits 2 on any
    /// violation.
    LemmaCheck {
        /// 1d | 2a | 2b | composition
        #[arg(long)]
        lemma: String,
        #[arg(long, default_value = "quartic")]
        function: String,
        #[arg(long, default_value = "0,0.1,0.5,1", value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, default_value = "0,0.1,0.5,1", value_delimiter = ',')]
        taus: Vec<f64>,
        #[arg(long, default_value_t = -2.0)]
        min: f64,
        #[arg(long, default_value_t = 2.0)]
        max: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Monte-Carlo samples (composition check only).
        #[arg(long, default_value_t = 200_000)]
        samples: u64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Override the smoothness constant the bounds are checked against.
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic stand-in corpus (MNIST-shaped IDX files).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 10000)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; help/version are success paths
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(ge) = cause.downcast_ref::<gsmooth::Error>() {
            if matches!(ge, gsmooth::Error::Io(_) | gsmooth::Error::IdxFormat(_)) {
                return 3;
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn write_or_print(out: Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, quiet } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            runner::run_experiment(&cfg, quiet)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Heatmap {
            path,
            metric,
            sigma,
            out,
        } => {
            let metric = match metric.as_str() {
                "accuracy" => runner::HeatmapMetric::Accuracy,
                "update-norm-std" => runner::HeatmapMetric::UpdateNormStd,
                other => anyhow::bail!("unknown metric `{other}` (accuracy|update-norm-std)"),
            };
            let file = if path.is_dir() {
                path.join("summary.csv")
            } else {
                path
            };
            let text = std::fs::read_to_string(&file)
                .map_err(gsmooth::Error::Io)
                .map_err(anyhow::Error::from)
                .map_err(|e| e.context(format!("reading {}", file.display())))?;
            let rows = runner::parse_summary(&text)?;
            let table = runner::heatmap_table(&rows, metric, sigma)?;
            write_or_print(out, &table)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SmoothDemo {
            function,
            sigmas,
            min,
            max,
            points,
            samples,
            seed,
            out,
        } => {
            let tf = runner::parse_test_function(&function)?;
            let csv = runner::smooth_demo_csv(&tf, &sigmas, (min, max), points, samples, seed)?;
            write_or_print(out, &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::LemmaCheck {
            lemma,
            function,
            sigmas,
            taus,
            min,
            max,
            points,
            samples,
            seed,
            lipschitz,
            out,
        } => {
            let kind = runner::LemmaKind::parse(&lemma)?;
            let tf = runner::parse_test_function(&function)?;
            let outcome = runner::lemma_check(
                kind,
                &tf,
                &sigmas,
                &taus,
                (min, max),
                points,
                samples,
                seed,
                lipschitz,
            )?;
            write_or_print(out, &outcome.csv)?;
            if outcome.violations > 0 {
                eprintln!("{} bound violations", outcome.violations);
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::SynthData {
            out,
            train,
            test,
            seed,
        } => {
            runner::synth_data(&out, train, test, seed)?;
            eprintln!(
                "wrote {train} train / {test} test images to {}",
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

//! End-to-end tests of the `gsmooth` binary: subcommands, exit codes, and
//! output formats.

use std::path::Path;
use std::process::{Command, Output};

fn gsmooth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsmooth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path, optimizer: &str, sigmas: &str, out_name: &str) -> std::path::PathBuf {
    let data_dir = dir.join("data");
    let out_dir = dir.join(out_name);
    let text = format!(
        r#"
[experiment]
name = "tiny"
optimizer = "{optimizer}"
sigmas = {sigmas}
learning_rate = 0.05
batch_size = 4
max_epochs = 2
patience = 0
eval_test = "epoch"

[noise]
pixel_std = [0.25]
label_flip = [0.1]

[dataset]
dir = "{data}"
train_limit = 60
test_limit = 30
validation_fraction = 0.1

[svrg]
inner_steps = 15

[output]
dir = "{out}"

[architecture]
[architecture.input]
channels = 1
height = 28
width = 28

[[architecture.layers]]
kind = "conv"
kernels = 2
size = 5
stride = 2

[[architecture.layers]]
kind = "relu"
lambda = 1e-4

[[architecture.layers]]
kind = "avg_pool"
window = 2
stride = 2

[[architecture.layers]]
kind = "flatten"

[[architecture.layers]]
kind = "dense"
units = 10
lambda = 1e-4
"#,
        data = data_dir.display(),
        out = out_dir.display(),
    );
    let path = dir.join(format!("{out_name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn make_data(dir: &Path) {
    let data_dir = dir.join("data");
    let out = gsmooth(&[
        "synth-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--train",
        "60",
        "--test",
        "30",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_error_exits_one() {
    let out = gsmooth(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path(), "sgd", "[0.0]", "run");
    let out = gsmooth(&["train", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_cell_and_summary_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path());
    let cfg = write_tiny_config(tmp.path(), "gsmooth_sgd", "[0.0, 0.2]", "run");
    let out = gsmooth(&["train", cfg.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = tmp.path().join("run");
    let summary = std::fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("optimizer,pixel_std,label_flip,sigma"));
    assert_eq!(summary.lines().count(), 3); // header + 2 sigma cells
    let cell = std::fs::read_to_string(run_dir.join("cell_px0.25_lf0.1_sigma0.2_rep0.csv")).unwrap();
    let mut lines = cell.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,train_loss,update_norm,test_accuracy"
    );
    // 60 images minus the 10% validation split leaves 54: 14 steps/epoch,
    // with per-epoch accuracy on the last step of each epoch
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 28);
    assert!(!rows[13].split(',').nth(4).unwrap().is_empty());
    assert!(rows[0].ends_with(','));
    // steps are strictly increasing across the run
    let steps: Vec<u64> = rows
        .iter()
        .map(|r| r.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    // summary invariants: accuracy in [0,1], update-norm std >= 0
    for row in gsmooth_cli::runner::parse_summary(&summary).unwrap() {
        let acc = row.test_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(row.update_norm_std >= 0.0);
    }
}

#[test]
fn env_var_overrides_dataset_dir() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path());
    let mut cfg_path = write_tiny_config(tmp.path(), "sgd", "[0.0]", "env_run");
    // break the configured dir; point the env var at the real one
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace(&tmp.path().join("data").display().to_string(), "/nonexistent/data");
    cfg_path = tmp.path().join("env_run2.toml");
    std::fs::write(&cfg_path, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gsmooth"))
        .args(["train", cfg_path.to_str().unwrap(), "--quiet"])
        .env("GSMOOTH_DATA_DIR", tmp.path().join("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path());
    let cfg_a = write_tiny_config(tmp.path(), "gsmooth_adam", "[0.1]", "run_a");
    let cfg_b = write_tiny_config(tmp.path(), "gsmooth_adam", "[0.1]", "run_b");
    assert!(gsmooth(&["train", cfg_a.to_str().unwrap(), "--quiet"]).status.success());
    assert!(gsmooth(&["train", cfg_b.to_str().unwrap(), "--quiet"]).status.success());
    for name in ["summary.csv", "cell_px0.25_lf0.1_sigma0.1_rep0.csv"] {
        let a = std::fs::read(tmp.path().join("run_a").join(name)).unwrap();
        let b = std::fs::read(tmp.path().join("run_b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn sigma_zero_smoothed_matches_baseline_run() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path());
    let cfg_s = write_tiny_config(tmp.path(), "gsmooth_svrg", "[0.0]", "run_s");
    let cfg_b = write_tiny_config(tmp.path(), "svrg", "[0.0]", "run_b");
    assert!(gsmooth(&["train", cfg_s.to_str().unwrap(), "--quiet"]).status.success());
    assert!(gsmooth(&["train", cfg_b.to_str().unwrap(), "--quiet"]).status.success());
    let pick = |dir: &str| {
        let text =
            std::fs::read_to_string(tmp.path().join(dir).join("summary.csv")).unwrap();
        let line = text.lines().nth(1).unwrap().to_string();
        // drop the optimizer-name column
        line.split_once(',').unwrap().1.to_string()
    };
    assert_eq!(pick("run_s"), pick("run_b"));
}

#[test]
fn heatmap_from_train_output() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path());
    let cfg = write_tiny_config(tmp.path(), "sgd", "[0.0]", "run");
    assert!(gsmooth(&["train", cfg.to_str().unwrap(), "--quiet"]).status.success());
    let out = gsmooth(&[
        "heatmap",
        tmp.path().join("run").to_str().unwrap(),
        "--metric",
        "accuracy",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "pixel_std\\label_flip,0.1");
    assert!(lines[1].starts_with("0.25,"));
}

#[test]
fn smooth_demo_closed_form_matches_mc() {
    let tmp = tempfile::tempdir().unwrap();
    let out_file = tmp.path().join("demo.csv");
    let out = gsmooth(&[
        "smooth-demo",
        "--function",
        "quartic",
        "--sigmas",
        "0,1",
        "--points",
        "9",
        "--samples",
        "200000",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&out_file).unwrap();
    let mut saw_origin = false;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.parse().unwrap_or(f64::NAN))
            .collect();
        let (sigma, x, _fx, closed, mc, se) = (f[0], f[1], f[2], f[3], f[4], f[5]);
        if sigma == 0.0 {
            assert_eq!(closed, mc);
            assert_eq!(se, 0.0);
        } else {
            assert!((closed - mc).abs() <= 3.0 * se, "{line}");
        }
        if sigma == 1.0 && x == 0.0 {
            saw_origin = true;
            assert!((closed - (-0.2499482768137962)).abs() < 1e-12);
        }
    }
    assert!(saw_origin);
}

#[test]
fn lemma_check_passes_and_detects_violations() {
    // bundled functions: all four checks pass with exit 0
    for lemma in ["1d", "2a", "2b"] {
        let out = gsmooth(&["lemma-check", "--lemma", lemma, "--function", "quartic"]);
        assert_eq!(out.status.code(), Some(0), "lemma {lemma}");
    }
    let out = gsmooth(&[
        "lemma-check",
        "--lemma",
        "composition",
        "--function",
        "quartic",
        "--sigmas",
        "0.3",
        "--taus",
        "0.5",
        "--points",
        "11",
        "--samples",
        "100000",
    ]);
    assert_eq!(out.status.code(), Some(0));

    // quadratic bound is exactly tight; margins are ~0 at every point
    let out = gsmooth(&[
        "lemma-check",
        "--lemma",
        "1d",
        "--function",
        "quadratic",
        "--sigmas",
        "0",
        "--taus",
        "1",
        "--points",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines().skip(1) {
        let margin: f64 = line.split(',').nth(6).unwrap().parse().unwrap();
        assert!(margin.abs() < 1e-9, "{line}");
    }

    // an understated smoothness constant is caught: exit code 2 with the
    // offending rows marked
    let out = gsmooth(&[
        "lemma-check",
        "--lemma",
        "1d",
        "--function",
        "quartic",
        "--lipschitz",
        "0.01",
        "--points",
        "11",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.ends_with(",true")), "no violated rows");
}

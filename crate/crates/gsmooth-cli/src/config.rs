//! Experiment configuration: TOML in, TOML out, loss-free round trips.

use anyhow::{bail, Context};
use gsmooth::layers::{LayerSpec, NetworkConfig, R1Coefficient, RegSign, Shape};
use gsmooth::optim::SigmaSchedule;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub regularization: RegularizationSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub seeds: SeedsSection,
    #[serde(default)]
    pub svrg: SvrgSection,
    #[serde(default)]
    pub adam: AdamSection,
    pub output: OutputSection,
    /// Optional explicit architecture; defaults to the benchmark CNN.
    #[serde(default)]
    pub architecture: Option<ArchitectureSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub optimizer: OptimizerKind,
    pub sigmas: Vec<f64>,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// When to measure clean-test accuracy: every epoch, once at the end,
    /// or never.
    #[serde(default)]
    pub eval_test: EvalTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalTest {
    #[default]
    Epoch,
    Final,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    GsmoothSgd,
    Adam,
    GsmoothAdam,
    Svrg,
    GsmoothSvrg,
}

impl OptimizerKind {
    pub fn is_smoothed(self) -> bool {
        matches!(
            self,
            OptimizerKind::GsmoothSgd | OptimizerKind::GsmoothAdam | OptimizerKind::GsmoothSvrg
        )
    }

    pub fn is_svrg(self) -> bool {
        matches!(self, OptimizerKind::Svrg | OptimizerKind::GsmoothSvrg)
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::GsmoothSgd => "gsmooth_sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::GsmoothAdam => "gsmooth_adam",
            OptimizerKind::Svrg => "svrg",
            OptimizerKind::GsmoothSvrg => "gsmooth_svrg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    /// Decay factor for the geometric schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Values for the explicit schedule (overrides the grid sigma).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub repeat_last: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Geometric,
    Explicit,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Constant,
            gamma: None,
            values: None,
            repeat_last: false,
        }
    }
}

impl ScheduleSection {
    /// Builds the sigma schedule for one grid cell.
    pub fn build(&self, cell_sigma: f64) -> anyhow::Result<SigmaSchedule> {
        let s = match self.kind {
            ScheduleKind::Constant => SigmaSchedule::constant(cell_sigma)?,
            ScheduleKind::Geometric => {
                let gamma = self
                    .gamma
                    .context("geometric schedule needs `gamma` in (0,1)")?;
                SigmaSchedule::geometric(cell_sigma, gamma)?
            }
            ScheduleKind::Explicit => {
                let values = self
                    .values
                    .clone()
                    .context("explicit schedule needs `values`")?;
                SigmaSchedule::explicit(values, self.repeat_last)?
            }
        };
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub pixel_std: Vec<f64>,
    pub label_flip: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            pixel_std: vec![0.0],
            label_flip: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationSection {
    pub sign: SignKind,
    pub dense_coefficient: CoefficientKind,
    pub lambda_relu1: f64,
    pub lambda_dense1: f64,
    pub lambda_relu2: f64,
    pub lambda_output: f64,
}

impl Default for RegularizationSection {
    fn default() -> Self {
        RegularizationSection {
            sign: SignKind::Derivation,
            dense_coefficient: CoefficientKind::OutputDim,
            lambda_relu1: 1e-7,
            lambda_dense1: 1e-7,
            lambda_relu2: 1e-5,
            lambda_output: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignKind {
    Derivation,
    Table3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    OutputDim,
    InputDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub validation_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: PathBuf::from("data"),
            train_limit: 5000,
            test_limit: 10000,
            validation_fraction: 0.1,
        }
    }
}

impl DatasetSection {
    /// Directory after applying the environment override.
    pub fn resolved_dir(&self) -> PathBuf {
        match std::env::var_os("GSMOOTH_DATA_DIR") {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.dir.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub data: u64,
    pub sampling: u64,
    pub init: u64,
    /// Seed replicates per grid cell.
    pub replicates: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            data: 1,
            sampling: 2,
            init: 3,
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrgSection {
    pub inner_steps: usize,
    pub tau_rule: TauRuleKind,
    pub snapshot_rule: SnapshotRuleKind,
}

impl Default for SvrgSection {
    fn default() -> Self {
        SvrgSection {
            inner_steps: 5000,
            tau_rule: TauRuleKind::SnapshotSigma,
            snapshot_rule: SnapshotRuleKind::UniformIterate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRuleKind {
    UniformIterate,
    LastIterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRuleKind {
    SnapshotSigma,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSection {
    pub beta: f64,
    pub theta: f64,
    pub epsilon: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        AdamSection {
            beta: 0.9,
            theta: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    pub input: InputShape,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerEntry {
    Conv {
        kernels: usize,
        size: usize,
        stride: usize,
        #[serde(default)]
        lambda: f64,
    },
    Relu {
        #[serde(default)]
        lambda: f64,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        #[serde(default)]
        lambda: f64,
    },
    Dropout {
        p: f64,
        #[serde(default)]
        lambda: f64,
    },
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.experiment.sigmas.is_empty() {
            bail!("experiment.sigmas must not be empty");
        }
        if self.experiment.learning_rate <= 0.0 {
            bail!("experiment.learning_rate must be positive");
        }
        if self.experiment.batch_size == 0 || self.experiment.max_epochs == 0 {
            bail!("experiment.batch_size and max_epochs must be positive");
        }
        if self.seeds.replicates == 0 {
            bail!("seeds.replicates must be at least 1");
        }
        if self.experiment.sigmas.iter().any(|s| *s < 0.0) {
            bail!("sigma values must be non-negative");
        }
        if self
            .noise
            .pixel_std
            .iter()
            .any(|s| *s < 0.0)
            || self.noise.label_flip.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            bail!("noise grid values out of range");
        }
        if !(0.0..1.0).contains(&self.dataset.validation_fraction) {
            bail!("dataset.validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Network for this experiment (explicit architecture or the benchmark
    /// CNN with the configured regularizer weights).
    pub fn network_config(&self) -> anyhow::Result<NetworkConfig> {
        let reg = &self.regularization;
        let mut cfg = match &self.architecture {
            None => NetworkConfig::benchmark_cnn([
                reg.lambda_relu1,
                reg.lambda_dense1,
                reg.lambda_relu2,
                reg.lambda_output,
            ]),
            Some(arch) => {
                let input = match (&arch.input.flat, &arch.input.channels) {
                    (Some(d), None) => Shape::Flat(*d),
                    (None, Some(c)) => Shape::Image {
                        c: *c,
                        h: arch.input.height.context("architecture.input.height")?,
                        w: arch.input.width.context("architecture.input.width")?,
                    },
                    _ => bail!("architecture.input needs either `flat` or channels/height/width"),
                };
                let layers = arch
                    .layers
                    .iter()
                    .map(|l| match *l {
                        LayerEntry::Conv {
                            kernels,
                            size,
                            stride,
                            lambda,
                        } => LayerSpec::Conv {
                            kernels,
                            size,
                            stride,
                            lambda,
                        },
                        LayerEntry::Relu { lambda } => LayerSpec::Activation { lambda },
                        LayerEntry::AvgPool { window, stride } => {
                            LayerSpec::AvgPool { window, stride }
                        }
                        LayerEntry::Flatten => LayerSpec::Flatten,
                        LayerEntry::Dense { units, lambda } => LayerSpec::Dense { units, lambda },
                        LayerEntry::Dropout { p, lambda } => LayerSpec::Dropout { p, lambda },
                    })
                    .collect();
                NetworkConfig::new(input, layers)
            }
        };
        cfg.reg_sign = match reg.sign {
            SignKind::Derivation => RegSign::Derivation,
            SignKind::Table3 => RegSign::Table3,
        };
        cfg.dense_coefficient = match reg.dense_coefficient {
            CoefficientKind::OutputDim => R1Coefficient::OutputDim,
            CoefficientKind::InputDim => R1Coefficient::InputDim,
        };
        Ok(cfg)
    }
}

fn default_batch() -> usize {
    16
}

fn default_epochs() -> usize {
    20
}

fn default_patience() -> usize {
    2
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[experiment]
name = "demo"
optimizer = "gsmooth_sgd"
sigmas = [0.0, 0.1]
learning_rate = 0.1
batch_size = 16
max_epochs = 20
patience = 2
eval_test = "epoch"

[noise]
pixel_std = [0.0, 0.5]
label_flip = [0.0]

[output]
dir = "runs/demo"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let again: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        cfg.experiment.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        cfg.noise.label_flip = vec![1.5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{SAMPLE}\n[experiment.bogus]\nx = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn custom_architecture_parses() {
        let text = format!(
            "{SAMPLE}
[architecture]
[architecture.input]
channels = 1
height = 6
width = 6

[[architecture.layers]]
kind = \"conv\"
kernels = 2
size = 3
stride = 1

[[architecture.layers]]
kind = \"relu\"
lambda = 1e-3

[[architecture.layers]]
kind = \"flatten\"

[[architecture.layers]]
kind = \"dense\"
units = 3
"
        );
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        let net_cfg = cfg.network_config().unwrap();
        assert_eq!(net_cfg.layers.len(), 4);
    }
}

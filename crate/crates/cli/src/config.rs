//! JSON run configuration.
//!
//! Seeds inside nested sections (`pretrain.seed`, baseline seeds) are offsets
//! added to the run seed, so `--seed` moves the whole run.

use std::path::{Path, PathBuf};

use quadmech::audit::{AuditCheck, SuiteScale};
use quadmech::baselines::{RestartConfig, SgdConfig};
use quadmech::datasets::SINUSOID_INPUT_DIM;
use quadmech::loss::LossKind;
use quadmech::mechanism::Sampler;
use quadmech::model::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::error::{read_input, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelSpec,
    /// Defaults to the squared loss for sinusoidal and MNIST, cross-entropy
    /// for tabular.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    pub pretrain: SgdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<RestartConfig>,
    pub mechanism: SweepConfig,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub audit: AuditConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Sinusoidal {
        pretrain_n: usize,
        finetune_n: usize,
        test_n: usize,
        /// Feed the affinely shifted coordinates to the model as well.
        #[serde(default)]
        shift_model_inputs: bool,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        pretrain_n: usize,
        finetune_n: usize,
        test_n: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default = "default_pixel_mean")]
        pixel_mean: f64,
        #[serde(default = "default_pixel_std")]
        pixel_std: f64,
    },
    Tabular {
        pretrain: PathBuf,
        finetune: PathBuf,
        /// Held-out file; without it `test_n` rows are split off the
        /// fine-tune file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default)]
        test_n: usize,
    },
}

fn default_noise() -> f64 {
    0.5
}
fn default_pixel_mean() -> f64 {
    0.1307
}
fn default_pixel_std() -> f64 {
    0.3081
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub lambda: f64,
    pub radii: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Projected dimensions; empty or `≥ p` means the full space.
    #[serde(default)]
    pub p_tildes: Vec<usize>,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "default_burn_in")]
    pub gibbs_burn_in: usize,
    #[serde(default = "default_thin")]
    pub gibbs_thin: usize,
    #[serde(default = "default_max_proposals")]
    pub max_rejection_proposals: u64,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
}

fn default_burn_in() -> usize {
    500
}
fn default_thin() -> usize {
    5
}
fn default_max_proposals() -> u64 {
    1_000_000
}
fn default_inflation() -> f64 {
    quadmech::privacy::DEFAULT_INFLATION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<SgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpsgd: Option<DpsgdBaseline>,
    /// Independent training runs per baseline cell.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    1
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            sgd: None,
            dpsgd: None,
            runs: default_runs(),
        }
    }
}

/// DP-SGD settings; ε comes from the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpsgdBaseline {
    pub delta: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_candidate_samples: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditScale {
    Quick,
    #[default]
    Full,
}

impl AuditScale {
    pub fn sizes(self) -> SuiteScale {
        match self {
            AuditScale::Quick => SuiteScale::quick(),
            AuditScale::Full => SuiteScale::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "all_checks")]
    pub checks: Vec<AuditCheck>,
    #[serde(default)]
    pub scale: AuditScale,
    /// Runs the ε audits with half the sound sensitivity.
    #[serde(default)]
    pub broken_delta_u: bool,
}

fn all_checks() -> Vec<AuditCheck> {
    AuditCheck::ALL.to_vec()
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            checks: all_checks(),
            scale: AuditScale::default(),
            broken_delta_u: false,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

impl RunConfig {
    /// Parses and validates; relative data paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => invalid(format!("config file {} not found", path.display())),
            _ => CliError::io(path, e),
        })?;
        let mut cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.task {
            TaskConfig::Sinusoidal { .. } => {}
            TaskConfig::Mnist { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            TaskConfig::Tabular {
                pretrain,
                finetune,
                test,
                ..
            } => {
                fix(pretrain);
                fix(finetune);
                if let Some(t) = test {
                    fix(t);
                }
            }
        }
    }

    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or(match self.task {
            TaskConfig::Sinusoidal { .. } | TaskConfig::Mnist { .. } => LossKind::MeanSquared,
            TaskConfig::Tabular { .. } => LossKind::CrossEntropy,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| invalid(format!("model: {e}")))?;
        self.pretrain
            .validate()
            .map_err(|e| invalid(format!("pretrain: {e}")))?;
        match &self.task {
            TaskConfig::Sinusoidal {
                pretrain_n,
                finetune_n,
                test_n,
                ..
            } => {
                if *pretrain_n == 0 || *finetune_n == 0 || *test_n == 0 {
                    return Err(invalid("sinusoidal dataset sizes must be >= 1"));
                }
                if self.model.input_dim != SINUSOID_INPUT_DIM || self.model.output_dim != 1 {
                    return Err(invalid(format!(
                        "sinusoidal task needs a {SINUSOID_INPUT_DIM} -> 1 model"
                    )));
                }
            }
            TaskConfig::Mnist {
                pretrain_n,
                finetune_n,
                test_n,
                noise_std,
                pixel_std,
                ..
            } => {
                if *pretrain_n == 0 || *finetune_n == 0 || *test_n == 0 {
                    return Err(invalid("mnist subset sizes must be >= 1"));
                }
                if !(*noise_std >= 0.0) || !(*pixel_std > 0.0) {
                    return Err(invalid("mnist needs noise_std >= 0 and pixel_std > 0"));
                }
                if self.model.output_dim != quadmech::datasets::MNIST_CLASSES {
                    return Err(invalid("mnist model must have 10 outputs"));
                }
            }
            TaskConfig::Tabular { test, test_n, .. } => {
                if test.is_none() && *test_n == 0 {
                    return Err(invalid("tabular task needs a test file or test_n >= 1"));
                }
            }
        }
        if let Some(r) = &self.restarts {
            if r.candidates == 0 {
                return Err(invalid("restarts.candidates must be >= 1"));
            }
        }
        let m = &self.mechanism;
        if m.epsilons.is_empty() || m.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid("mechanism.epsilons must be nonempty, positive and finite"));
        }
        if m.radii.is_empty() || m.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("mechanism.radii must be nonempty, positive and finite"));
        }
        if m.p_tildes.contains(&0) {
            return Err(invalid("mechanism.p_tildes entries must be >= 1"));
        }
        if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
            return Err(invalid("mechanism.lambda must be >= 0"));
        }
        if !(m.inflation >= 1.0 && m.inflation.is_finite()) {
            return Err(invalid("mechanism.inflation must be >= 1"));
        }
        if m.gibbs_thin == 0 || m.max_rejection_proposals == 0 {
            return Err(invalid("gibbs_thin and max_rejection_proposals must be >= 1"));
        }
        if self.eval.n_candidate_samples == 0 {
            return Err(invalid("eval.n_candidate_samples must be >= 1"));
        }
        if let Some(s) = &self.baselines.sgd {
            s.validate().map_err(|e| invalid(format!("baselines.sgd: {e}")))?;
        }
        if let Some(d) = &self.baselines.dpsgd {
            if !(d.delta > 0.0 && d.delta < 1.0) || !(d.clip_norm > 0.0) || d.epochs == 0 || d.batch_size == 0 {
                return Err(invalid(
                    "baselines.dpsgd needs delta in (0,1), clip_norm > 0, epochs and batch_size >= 1",
                ));
            }
        }
        if self.baselines.runs == 0 {
            return Err(invalid("baselines.runs must be >= 1"));
        }
        Ok(())
    }

    /// Input files named by the task, in a fixed order.
    pub fn data_files(&self) -> Vec<PathBuf> {
        match &self.task {
            TaskConfig::Sinusoidal { .. } => Vec::new(),
            TaskConfig::Mnist { images, labels, .. } => vec![images.clone(), labels.clone()],
            TaskConfig::Tabular {
                pretrain,
                finetune,
                test,
                ..
            } => {
                let mut v = vec![pretrain.clone(), finetune.clone()];
                v.extend(test.clone());
                v
            }
        }
    }

    /// Fails with [`CliError::DataMissing`] on the first absent input.
    pub fn check_data(&self) -> Result<()> {
        for f in self.data_files() {
            if !f.exists() {
                return Err(CliError::DataMissing { path: f });
            }
        }
        Ok(())
    }

    pub fn read_data_files(&self) -> Result<Vec<(PathBuf, Vec<u8>)>> {
        self.data_files()
            .into_iter()
            .map(|f| read_input(&f).map(|b| (f, b)))
            .collect()
    }
}

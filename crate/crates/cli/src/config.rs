//! Experiment configuration: a TOML file with sections, overridden by flags.

use std::path::{Path, PathBuf};

use netgrow::growth_models::ThreadModelParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NETGROW_OUT";
const FALLBACK_OUT_DIR: &str = "netgrow-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Toy,
    Thread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism. Never affects results.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub control: ControlConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub evaluate: EvaluateConfig,
}

/// Thread-model parameters, or a corpus to fit them from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub popularity_alpha: f64,
    pub novelty_tau: f64,
    pub root_beta: f64,
    /// When set, θ is fitted from this corpus and the values above are ignored.
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub lambda: f64,
    pub horizon: usize,
    /// Paths sampled per action-selection step.
    pub samples: usize,
    /// Paths per KL-optimal step; 1 follows the trained proposal.
    pub kl_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Temperatures to train at; empty means `control.lambda`.
    pub lambdas: Vec<f64>,
    pub samples: usize,
    /// Learning rate; defaults to 0.1·λ.
    pub eta: Option<f64>,
    pub max_iters: usize,
    pub k_max: usize,
    pub grad_tol: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub episodes: usize,
    pub compliance: Vec<f64>,
    pub weights: Option<PathBuf>,
    /// Episode indices rendered per controller.
    pub render_episodes: Vec<usize>,
    pub dump_episodes: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Thread,
            seed: 0,
            workers: 0,
            output_dir: None,
            model: ModelConfig::default(),
            control: ControlConfig::default(),
            training: TrainingConfig::default(),
            sweep: SweepConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = ThreadModelParams::default();
        ModelConfig {
            popularity_alpha: p.popularity_alpha,
            novelty_tau: p.novelty_tau,
            root_beta: p.root_beta,
            corpus: None,
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            lambda: 0.2,
            horizon: 50,
            samples: 1000,
            kl_samples: 1,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambdas: Vec::new(),
            samples: 10_000,
            eta: None,
            max_iters: 100,
            k_max: netgrow::tree_state::DEFAULT_K_MAX,
            grad_tol: 1e-6,
            plateau_window: 10,
            plateau_tol: 0.01,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![
                0.001, 0.005, 0.01, 0.02, 0.05, 0.07, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0, 2.0,
            ],
            horizon: 10,
        }
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            episodes: 1000,
            compliance: vec![0.5, 1.0],
            weights: None,
            render_episodes: vec![0],
            dump_episodes: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        rebase(&mut config.model.corpus);
        rebase(&mut config.evaluate.weights);
        rebase(&mut config.output_dir);
        Ok(config)
    }

    pub fn thread_params(&self) -> ThreadModelParams {
        ThreadModelParams::new(
            self.model.popularity_alpha,
            self.model.novelty_tau,
            self.model.root_beta,
        )
    }

    pub fn training_lambdas(&self) -> Vec<f64> {
        if self.training.lambdas.is_empty() {
            vec![self.control.lambda]
        } else {
            self.training.lambdas.clone()
        }
    }

    /// Output directory: the config/flag value, else `$NETGROW_OUT`, else
    /// `netgrow-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        let positive = |name: &str, v: f64| -> Result<(), CliError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                usage(format!("{name} must be a positive number, got {v}"))
            }
        };
        positive("control.lambda (temperature)", self.control.lambda)?;
        for &l in self.training.lambdas.iter().chain(&self.sweep.lambdas) {
            positive("every temperature in training.lambdas / sweep.lambdas", l)?;
        }
        if self.control.horizon < 1 || self.sweep.horizon < 1 {
            return usage("horizons must be at least 1 (set control.horizon / sweep.horizon)".into());
        }
        if self.control.samples < 1 || self.control.kl_samples < 1 || self.training.samples < 1 {
            return usage(
                "sample counts M must be at least 1 (set control.samples / control.kl_samples / training.samples)".into(),
            );
        }
        if self.evaluate.episodes < 1 {
            return usage("evaluate.episodes must be at least 1".into());
        }
        if self.training.k_max < 1 {
            return usage("training.k_max must be at least 1".into());
        }
        if let Some(eta) = self.training.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return usage(format!("training.eta must be non-negative, got {eta}"));
            }
        }
        for &c in &self.evaluate.compliance {
            if !(c >= 0.0) {
                return usage(format!("compliance strengths must be non-negative, got {c}"));
            }
        }
        if self.model.corpus.is_none() {
            self.thread_params()
                .validate()
                .map_err(|e| CliError::Usage(format!("[model] {e}")))?;
        }
        Ok(())
    }
}

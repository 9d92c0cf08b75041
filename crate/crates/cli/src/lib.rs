//! Command-line experiments: fitting, toy λ sweeps, CE training and
//! closed-loop evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod weights;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "netgrow", version, about = "KL control of growing networks")]
pub struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (default: $NETGROW_OUT, else ./netgrow-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit thread-model parameters to a corpus of parent vectors.
    Fit(FitArgs),
    /// Generate a synthetic thread corpus.
    Generate(GenerateArgs),
    /// Exact MAP rollouts of the toy process over a temperature grid.
    ToySweep(ToySweepArgs),
    /// Train proposal weights with the cross-entropy method.
    CeTrain(CeTrainArgs),
    /// Compare controllers in closed loop.
    Evaluate(EvaluateArgs),
    /// Render a parent vector as DOT.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Corpus file, one parent vector per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub threads: usize,
    /// Replies per thread (default: control.horizon).
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ToySweepArgs {
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CeTrainArgs {
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Paths per iteration (M).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Weights CSV from `ce-train`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Paths per control step (M).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated compliance strengths.
    #[arg(long, value_delimiter = ',')]
    pub compliance: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Parent vector, e.g. "1 1 2".
    #[arg(long, conflicts_with = "corpus")]
    pub tree: Option<String>,
    /// Corpus file to take the tree from.
    #[arg(long, requires = "line")]
    pub corpus: Option<PathBuf>,
    /// 1-based line of the corpus.
    #[arg(long)]
    pub line: Option<usize>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[arg(long, default_value = "tree")]
    pub name: String,
}

impl Cli {
    /// The config file (or defaults) with global flags applied.
    pub fn resolve_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        Ok(config)
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = cli.resolve_config()?;
    commands::apply_overrides(&mut config, &cli.command);
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", config.workers)))?;
    pool.install(|| commands::dispatch(&config, &cli.command))
}

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use netgrow::ce_trainer::{
    CeProblem, DegreeHistogramFeatures, FeatureMap, IterStats, StopReason, TrainConfig,
    TrainOutcome,
};
use netgrow::closed_loop::{ClosedLoop, Controller};
use netgrow::exact_solver::{lambda_sweep, region_boundaries, StateLattice, DEFAULT_LAYER_CAP};
use netgrow::growth_models::{
    fit, generate_corpus, FitOptions, FitReport, GrowthModel, HIndexCost, StateCost, ThreadModel,
    ThreadModelParams, ToyModel,
};
use netgrow::rng::derive_seed;
use netgrow::tree_state::{parse_corpus, write_corpus};
use netgrow::ParentVector;
use serde::Serialize;

use crate::config::{ExperimentConfig, Task};
use crate::error::CliError;
use crate::weights::{read_weights, write_weights};
use crate::Command;

/// Copies subcommand flags into the config.
pub fn apply_overrides(config: &mut ExperimentConfig, command: &Command) {
    match command {
        Command::Fit(a) => {
            if let Some(c) = &a.corpus {
                config.model.corpus = Some(c.clone());
            }
        }
        Command::Generate(_) | Command::Render(_) => {}
        Command::ToySweep(a) => {
            if let Some(l) = &a.lambdas {
                config.sweep.lambdas = l.clone();
            }
            if let Some(h) = a.horizon {
                config.sweep.horizon = h;
            }
        }
        Command::CeTrain(a) => {
            if let Some(l) = &a.lambdas {
                config.training.lambdas = l.clone();
            }
            if let Some(m) = a.samples {
                config.training.samples = m;
            }
            if let Some(i) = a.iters {
                config.training.max_iters = i;
            }
            if a.eta.is_some() {
                config.training.eta = a.eta;
            }
            if let Some(h) = a.horizon {
                config.control.horizon = h;
            }
            if let Some(k) = a.k_max {
                config.training.k_max = k;
            }
        }
        Command::Evaluate(a) => {
            if let Some(w) = &a.weights {
                config.evaluate.weights = Some(w.clone());
            }
            if let Some(e) = a.episodes {
                config.evaluate.episodes = e;
            }
            if let Some(m) = a.samples {
                config.control.samples = m;
            }
            if let Some(c) = &a.compliance {
                config.evaluate.compliance = c.clone();
            }
        }
    }
}

pub fn dispatch(config: &ExperimentConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Fit(_) => cmd_fit(config),
        Command::Generate(a) => cmd_generate(config, a.threads, a.length),
        Command::ToySweep(_) => cmd_toy_sweep(config),
        Command::CeTrain(_) => cmd_ce_train(config),
        Command::Evaluate(_) => cmd_evaluate(config),
        Command::Render(a) => cmd_render(a),
    }
}

fn output_dir(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = config.output_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Reads a corpus; an empty file is a usage error, a malformed line a data
/// error naming the line.
pub fn read_corpus(path: &Path) -> Result<Vec<ParentVector>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::Usage(format!("corpus {} is empty", path.display())));
    }
    parse_corpus(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn fit_corpus(path: &Path) -> Result<(FitReport, usize), CliError> {
    let corpus = read_corpus(path)?;
    let report = fit(&corpus, &ThreadModelParams::default(), &FitOptions::default())?;
    info!(
        "fitted alpha = {:.4}, tau = {:.4}, beta = {:.4} on {} threads (nll {:.3})",
        report.params.popularity_alpha,
        report.params.novelty_tau,
        report.params.root_beta,
        corpus.len(),
        report.nll
    );
    Ok((report, corpus.len()))
}

/// Thread-model parameters: fitted when the config names a corpus.
fn thread_params(config: &ExperimentConfig) -> Result<ThreadModelParams, CliError> {
    match &config.model.corpus {
        Some(path) => Ok(fit_corpus(path)?.0.params),
        None => Ok(config.thread_params()),
    }
}

#[derive(Serialize)]
struct FitOutput {
    popularity_alpha: f64,
    novelty_tau: f64,
    root_beta: f64,
    nll: f64,
    grad_norm: f64,
    iterations: u64,
    threads: usize,
}

fn cmd_fit(config: &ExperimentConfig) -> Result<(), CliError> {
    let path = config
        .model
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Usage("fit needs a corpus (--corpus or model.corpus)".into()))?;
    let (report, threads) = fit_corpus(path)?;
    let out = FitOutput {
        popularity_alpha: report.params.popularity_alpha,
        novelty_tau: report.params.novelty_tau,
        root_beta: report.params.root_beta,
        nll: report.nll,
        grad_norm: report.grad_norm,
        iterations: report.iterations,
        threads,
    };
    let text = toml::to_string(&out).expect("plain struct serializes");
    let file = output_dir(config)?.join("fit.toml");
    fs::write(&file, text)?;
    info!("wrote {}", file.display());
    Ok(())
}

fn cmd_generate(config: &ExperimentConfig, threads: usize, length: Option<usize>) -> Result<(), CliError> {
    if threads < 1 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let model = ThreadModel::new(thread_params(config)?)?;
    let length = length.unwrap_or(config.control.horizon);
    let corpus = generate_corpus(&model, threads, length, config.seed)?;
    let file = output_dir(config)?.join("corpus.txt");
    fs::write(&file, write_corpus(&corpus))?;
    info!("wrote {} threads to {}", corpus.len(), file.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRecord {
    lambda: f64,
    structure: String,
    end_cost: f64,
    final_node_count: usize,
    wait_steps: usize,
    p_no_add: f64,
    p_root: f64,
    final_state: String,
}

fn cmd_toy_sweep(config: &ExperimentConfig) -> Result<(), CliError> {
    let model = ToyModel::with_horizon(config.sweep.horizon);
    model.validate()?;
    let start = model.initial_state();
    let t0 = start.len();
    if config.sweep.horizon < t0 {
        return Err(CliError::Usage(format!("sweep.horizon must be at least {t0}")));
    }
    let lattice = StateLattice::build(&model, &model, &start, t0, model.horizon, DEFAULT_LAYER_CAP)?;
    let rows = lambda_sweep(&lattice, &config.sweep.lambdas)?;
    let dir = output_dir(config)?;

    let mut w = csv::Writer::from_path(dir.join("toy_sweep.csv"))?;
    for row in &rows {
        w.serialize(SweepRecord {
            lambda: row.lambda,
            structure: row.structure.to_string(),
            end_cost: row.end_cost,
            final_node_count: row.final_node_count,
            wait_steps: row.wait_steps,
            p_no_add: row.p_no_add,
            p_root: row.p_root,
            final_state: row.final_state.to_string(),
        })?;
        let name = format!("toy_map_lambda{}", row.lambda);
        fs::write(dir.join(format!("{name}.dot")), row.final_state.to_dot(&name))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("toy_boundaries.csv"))?;
    w.write_record(["lambda_below", "lambda_above", "from", "to"])?;
    for b in region_boundaries(&rows) {
        w.write_record([
            b.lambda_below.to_string(),
            b.lambda_above.to_string(),
            b.from.to_string(),
            b.to.to_string(),
        ])?;
    }
    w.flush()?;
    for row in &rows {
        info!(
            "lambda {}: {} (end cost {:.4}, waits {})",
            row.lambda, row.structure, row.end_cost, row.wait_steps
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRecord {
    lambda: f64,
    iterations: usize,
    best_iteration: usize,
    stop: String,
    first5_median_effss: f64,
    last5_median_effss: f64,
    best_effss: f64,
    samples: usize,
    weights_file: String,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn train_config(config: &ExperimentConfig, lambda: f64) -> TrainConfig {
    let t = &config.training;
    TrainConfig {
        samples: t.samples,
        eta: t.eta,
        max_iters: t.max_iters,
        grad_tol: t.grad_tol,
        plateau_window: t.plateau_window,
        plateau_tol: t.plateau_tol,
        seed: derive_seed(config.seed, &[lambda.to_bits()]),
        ..TrainConfig::default()
    }
}

fn train_logged<M, C>(
    problem: &CeProblem<'_, M, C, DegreeHistogramFeatures>,
    lambda: f64,
    config: &TrainConfig,
    log_path: &Path,
) -> Result<TrainOutcome, CliError>
where
    M: GrowthModel + ?Sized,
    C: StateCost + ?Sized,
{
    let mut log = csv::Writer::from_path(log_path)?;
    let mut io_error = None;
    let w0 = problem.zero_weights(lambda);
    let result = problem.train_observed(&w0, config, &mut |s: &IterStats| {
        if io_error.is_none() {
            if let Err(e) = log.serialize(s).and_then(|_| log.flush().map_err(csv::Error::from)) {
                io_error = Some(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    result.map_err(|e| {
        CliError::Numerical(format!(
            "{e}; per-iteration diagnostics in {}",
            log_path.display()
        ))
    })
}

fn cmd_ce_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let dir = output_dir(config)?;
    let features = DegreeHistogramFeatures {
        k_max: config.training.k_max,
    };
    let horizon = config.control.horizon;
    let thread = match config.task {
        Task::Thread => Some(ThreadModel::new(thread_params(config)?)?),
        Task::Toy => None,
    };
    let toy = ToyModel::with_horizon(horizon);
    let hcost = HIndexCost { horizon };
    let mut summary = csv::Writer::from_path(dir.join("ce_summary.csv"))?;
    let mut lambdas = config.training_lambdas();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    for lambda in lambdas {
        let log_path = dir.join(format!("training_log_lambda{lambda}.csv"));
        let train = train_config(config, lambda);
        let outcome = match &thread {
            Some(model) => {
                let problem = CeProblem {
                    model,
                    cost: &hcost,
                    features: &features,
                    start: ParentVector::new(),
                    t0: 0,
                    horizon,
                };
                train_logged(&problem, lambda, &train, &log_path)?
            }
            None => {
                let start = toy.initial_state();
                if horizon < start.len() {
                    return Err(CliError::Usage("control.horizon must be at least 1".into()));
                }
                let problem = CeProblem {
                    model: &toy,
                    cost: &toy,
                    features: &features,
                    t0: start.len(),
                    start,
                    horizon,
                };
                train_logged(&problem, lambda, &train, &log_path)?
            }
        };
        let weights_name = format!("weights_lambda{lambda}.csv");
        write_weights(&dir.join(&weights_name), &outcome.best)?;
        let effss: Vec<f64> = outcome.log.iter().map(|s| s.effss).collect();
        let head = &effss[..effss.len().min(5)];
        let tail = &effss[effss.len().saturating_sub(5)..];
        let best_effss = outcome.log.get(outcome.best_iteration).map_or(f64::NAN, |s| s.effss);
        info!(
            "lambda {lambda}: {} iterations ({}), best EffSS {best_effss:.1} of {} at iteration {}",
            outcome.log.len(),
            stop_name(outcome.stop),
            train.samples,
            outcome.best_iteration
        );
        summary.serialize(SummaryRecord {
            lambda,
            iterations: outcome.log.len(),
            best_iteration: outcome.best_iteration,
            stop: stop_name(outcome.stop).into(),
            first5_median_effss: median(head),
            last5_median_effss: median(tail),
            best_effss,
            samples: train.samples,
            weights_file: weights_name,
        })?;
        summary.flush()?;
    }
    Ok(())
}

fn stop_name(stop: StopReason) -> &'static str {
    match stop {
        StopReason::GradientTolerance => "gradient_tolerance",
        StopReason::EffssPlateau => "effss_plateau",
        StopReason::MaxIterations => "max_iterations",
    }
}

#[derive(Serialize)]
struct ControllerRecord {
    controller: String,
    episodes: usize,
    final_mean_h: f64,
    final_stderr: Option<f64>,
}

#[derive(Serialize)]
struct EpisodeDump {
    controller: String,
    episode: usize,
    final_h: u32,
    accepted_highlights: usize,
    tree: String,
    /// Highlight per step, space-separated (0 = none).
    highlights: String,
    /// Acceptance per step as 0/1.
    accepted: String,
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn cmd_evaluate(config: &ExperimentConfig) -> Result<(), CliError> {
    if config.task != Task::Thread {
        return Err(CliError::Usage("evaluate runs the thread task only".into()));
    }
    let path = config.evaluate.weights.as_ref().ok_or_else(|| {
        CliError::Usage("evaluate needs trained weights (--weights or evaluate.weights)".into())
    })?;
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "weights file {} does not exist; run ce-train first",
            path.display()
        )));
    }
    let weights = read_weights(path)?;
    if weights.t0() != 0 {
        return Err(CliError::Data(format!(
            "{}: thread weights must start at t = 0",
            path.display()
        )));
    }
    if weights.horizon() != config.control.horizon {
        warn!(
            "weights cover horizon {}, not control.horizon {}; using the weights' horizon",
            weights.horizon(),
            config.control.horizon
        );
    }
    if weights.lambda() != config.control.lambda {
        warn!(
            "weights were trained at lambda {}, not control.lambda {}; using the weights' value",
            weights.lambda(),
            config.control.lambda
        );
    }
    let model = ThreadModel::new(thread_params(config)?)?;
    let features = DegreeHistogramFeatures {
        k_max: weights.dim() - 1,
    };
    debug_assert_eq!(features.dim(), weights.dim());
    let cost = HIndexCost {
        horizon: weights.horizon(),
    };
    let closed_loop = ClosedLoop {
        model: &model,
        cost: &cost,
        features: &features,
        weights: &weights,
        start: ParentVector::new(),
    };
    let samples = config.control.samples;
    let mut controllers = vec![
        Controller::Uncontrolled,
        Controller::KlOptimal {
            samples: config.control.kl_samples,
        },
    ];
    controllers.extend(
        config
            .evaluate
            .compliance
            .iter()
            .map(|&compliance| Controller::ActionSelection { compliance, samples }),
    );
    let evaluation = closed_loop.evaluate(&controllers, config.evaluate.episodes, config.seed)?;
    let dir = output_dir(config)?;

    let mut w = csv::Writer::from_path(dir.join("evaluation.csv"))?;
    for row in evaluation.rows() {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("evaluation_summary.csv"))?;
    for c in &evaluation.columns {
        info!(
            "{}: mean final h-index {:.3} (stderr {})",
            c.name,
            c.final_mean(),
            c.final_stderr().map_or("n/a".into(), |s| format!("{s:.3}"))
        );
        w.serialize(ControllerRecord {
            controller: c.name.clone(),
            episodes: c.episodes.len(),
            final_mean_h: c.final_mean(),
            final_stderr: c.final_stderr(),
        })?;
        for &e in &config.evaluate.render_episodes {
            if let Some(episode) = c.episodes.get(e) {
                let name = format!("{}_episode{e}", slug(&c.name));
                fs::write(dir.join(format!("{name}.dot")), episode.final_state.to_dot(&name))?;
            }
        }
    }
    w.flush()?;

    if config.evaluate.dump_episodes {
        let mut w = csv::Writer::from_path(dir.join("episodes.csv"))?;
        for c in &evaluation.columns {
            for (i, e) in c.episodes.iter().enumerate() {
                w.serialize(EpisodeDump {
                    controller: c.name.clone(),
                    episode: i,
                    final_h: e.final_h_index(),
                    accepted_highlights: e.accepted.iter().filter(|&&a| a).count(),
                    tree: e.final_state.to_string(),
                    highlights: join(e.highlights.iter()),
                    accepted: join(e.accepted.iter().map(|&a| u8::from(a))),
                })?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_render(args: &crate::RenderArgs) -> Result<(), CliError> {
    let tree: ParentVector = match (&args.tree, &args.corpus, args.line) {
        (Some(text), _, _) => text
            .parse()
            .map_err(|e| CliError::Data(format!("--tree: {e}")))?,
        (None, Some(path), Some(line)) => {
            let corpus = read_corpus(path)?;
            corpus.get(line.wrapping_sub(1)).cloned().ok_or_else(|| {
                CliError::Usage(format!(
                    "line {line} is outside the corpus ({} trees)",
                    corpus.len()
                ))
            })?
        }
        _ => return Err(CliError::Usage("render needs --tree or --corpus with --line".into())),
    };
    let dot = tree.to_dot(&args.name);
    match &args.file {
        Some(path) => fs::write(path, dot)?,
        None => print!("{dot}"),
    }
    Ok(())
}

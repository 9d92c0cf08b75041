//! Closed-loop control of the original (non-KL) problem.
//!
//! At each step the controller samples paths from the KL-optimal dynamics (a
//! trained proposal, or an exact table on small problems), estimates the
//! cost-to-go of each reachable successor from the first-step marginal, and
//! highlights the successor with the lowest estimate. A simulated user
//! follows the highlight with probability p′ = c/(1+c).

use log::warn;
use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::Serialize;

use crate::ce_trainer::{FeatureMap, ProposalPolicy, ProposalWeights};
use crate::error::{Error, Result};
use crate::growth_models::{sample_next, GrowthModel, StateCost};
use crate::path_sampler::{
    first_step_marginal, normalized_weights, sample_paths, successor_cost_estimates, Policy,
    StepBuffer,
};
use crate::rng::{derive_seed, name_key, substream};
use crate::tree_state::{GrowingTree, Label, ParentVector, NO_NODE};

// stream keys within one step
const SAMPLE_KEY: u64 = 0;
const USER_KEY: u64 = 1;
const DRAW_KEY: u64 = 2;

/// How strongly a highlight sways the user.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InteractionModel {
    pub compliance_strength: f64,
}

impl InteractionModel {
    /// `compliance_strength` may be `f64::INFINITY` for full control.
    pub fn new(compliance_strength: f64) -> Result<Self> {
        if !(compliance_strength >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "compliance strength must be non-negative, got {compliance_strength}"
            )));
        }
        Ok(InteractionModel {
            compliance_strength,
        })
    }

    /// Probability p′ that the user replies to the highlighted node.
    pub fn acceptance(&self) -> f64 {
        let c = self.compliance_strength;
        if c.is_infinite() {
            1.0
        } else {
            c / (1.0 + c)
        }
    }
}

/// Outcome of one simulated user step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserStep {
    pub label: Label,
    pub accepted: bool,
}

/// The user replies to `highlight` with probability p′ and otherwise follows
/// the uncontrolled model. `NO_NODE` means nothing is highlighted.
pub fn step_user<M: GrowthModel + ?Sized, R: Rng + ?Sized>(
    interaction: &InteractionModel,
    highlight: Label,
    model: &M,
    tree: &GrowingTree,
    t: usize,
    rng: &mut R,
) -> Result<UserStep> {
    if highlight != NO_NODE && !tree.is_valid_label(highlight) {
        return Err(Error::InvalidLabel {
            label: highlight,
            node_count: tree.node_count(),
        });
    }
    let u = rng.random::<f64>();
    if highlight != NO_NODE && u < interaction.acceptance() {
        return Ok(UserStep {
            label: highlight,
            accepted: true,
        });
    }
    Ok(UserStep {
        label: sample_next(model, tree, t, rng)?,
        accepted: false,
    })
}

/// Argmin of the successor estimates with the lowest label winning ties, or
/// `NO_NODE` when the highlight has no effect (p′ = 0) or nothing was
/// estimated.
///
/// Highlighting `h` has expected cost `p′Ĵ(h) + (1−p′)⟨Ĵ⟩_p` and the null
/// action `⟨Ĵ⟩_p`; the second term is shared, so only `Ĵ(h)` matters and the
/// best highlight is never worse than no highlight.
pub fn choose_action(estimates: &[(Label, f64)], acceptance: f64) -> Label {
    if acceptance <= 0.0 {
        return NO_NODE;
    }
    estimates
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map_or(NO_NODE, |(l, _)| l)
}

/// A selected action with the estimates it was based on.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChoice {
    pub action: Label,
    /// Ĵ(x′) up to a shared constant, per successor in the marginal support.
    pub estimates: Vec<(Label, f64)>,
    /// True when the batch was degenerate and the action fell back to the
    /// sampler's most probable successor.
    pub fallback: bool,
}

/// Samples `m` paths from `sampler` at (x, t), forms the weighted first-step
/// marginal and the successor cost estimates, and picks the action.
#[allow(clippy::too_many_arguments)]
pub fn select_action<P, M, C>(
    sampler: &P,
    model: &M,
    cost: &C,
    x: &ParentVector,
    horizon: usize,
    lambda: f64,
    m: usize,
    acceptance: f64,
    seed: u64,
) -> Result<ActionChoice>
where
    P: Policy + ?Sized,
    M: GrowthModel + ?Sized,
    C: StateCost + ?Sized,
{
    let t = x.len();
    if t >= horizon {
        return Err(Error::InvalidParameter(format!(
            "no action to select at t = {t} with horizon {horizon}"
        )));
    }
    let tree = GrowingTree::from_parent_vector(x);
    if acceptance <= 0.0 {
        return Ok(ActionChoice {
            action: NO_NODE,
            estimates: Vec::new(),
            fallback: false,
        });
    }
    let batch = sample_paths(sampler, cost, x, t, horizon, m, lambda, seed)?;
    let marginal = match first_step_marginal(&batch) {
        Ok(marginal) => marginal,
        Err(Error::DegenerateBatch) => Vec::new(),
        Err(e) => return Err(e),
    };
    if marginal.is_empty() {
        let mut buf = StepBuffer::default();
        sampler.step(&tree, t, &mut buf)?;
        let action = buf
            .labels
            .iter()
            .zip(&buf.q)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map_or(NO_NODE, |(&l, _)| l);
        warn!("t = {t}: every path weight vanished; highlighting the proposal's mode {action}");
        return Ok(ActionChoice {
            action,
            estimates: Vec::new(),
            fallback: true,
        });
    }
    let estimates = successor_cost_estimates(&marginal, model, &tree, t, lambda)?;
    Ok(ActionChoice {
        action: choose_action(&estimates, acceptance),
        estimates,
        fallback: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Controller {
    Uncontrolled,
    /// Follows the approximate KL-optimal dynamics. With `samples = 1` each
    /// step is drawn from the trained proposal; larger values draw one of
    /// `samples` proposal paths by importance weight and take its first step.
    KlOptimal { samples: usize },
    /// Highlights the argmin successor; the user complies per
    /// `InteractionModel`.
    ActionSelection { compliance: f64, samples: usize },
}

impl Controller {
    pub fn name(&self) -> String {
        match self {
            Controller::Uncontrolled => "uncontrolled".into(),
            Controller::KlOptimal { .. } => "kl_optimal".into(),
            Controller::ActionSelection { compliance, .. } => {
                format!("action_selection(compliance={compliance})")
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Controller::Uncontrolled => Ok(()),
            Controller::KlOptimal { samples } | Controller::ActionSelection { samples, .. }
                if samples == 0 =>
            {
                Err(Error::InvalidParameter("sample count must be at least 1".into()))
            }
            Controller::ActionSelection { compliance, .. } => {
                InteractionModel::new(compliance).map(|_| ())
            }
            Controller::KlOptimal { .. } => Ok(()),
        }
    }
}

/// One simulated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub controller: String,
    pub t0: usize,
    /// Final state; the state at time t is its prefix of length t.
    pub final_state: ParentVector,
    /// Highlighted node per step (`NO_NODE` for none).
    pub highlights: Vec<Label>,
    pub accepted: Vec<bool>,
    /// h-index after each step.
    pub h_index: Vec<u32>,
    pub end_cost: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.highlights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.highlights.is_empty()
    }

    pub fn state_at(&self, t: usize) -> ParentVector {
        ParentVector::from_entries(self.final_state.entries()[..t].to_vec())
            .expect("prefix of a valid parent vector")
    }

    pub fn final_h_index(&self) -> u32 {
        self.h_index.last().copied().unwrap_or(0)
    }
}

/// Everything a controller needs: dynamics, task cost, and the trained
/// proposal that stands in for the KL-optimal dynamics.
pub struct ClosedLoop<'a, M: ?Sized, C: ?Sized, F: ?Sized> {
    pub model: &'a M,
    pub cost: &'a C,
    pub features: &'a F,
    pub weights: &'a ProposalWeights,
    pub start: ParentVector,
}

impl<M, C, F> ClosedLoop<'_, M, C, F>
where
    M: GrowthModel + ?Sized,
    C: StateCost + ?Sized,
    F: FeatureMap + ?Sized,
{
    pub fn horizon(&self) -> usize {
        self.weights.horizon()
    }

    /// Runs one episode; step `t` draws from streams keyed by `(seed, t)`.
    pub fn run_episode(&self, controller: &Controller, seed: u64) -> Result<EpisodeRecord> {
        controller.validate()?;
        let (t0, horizon) = (self.start.len(), self.horizon());
        if t0 < self.weights.t0() || t0 > horizon {
            return Err(Error::InvalidParameter(format!(
                "start time {t0} is outside the weights' range {}..{horizon}",
                self.weights.t0()
            )));
        }
        let policy = ProposalPolicy::new(self.model, self.features, self.weights)?;
        let lambda = self.weights.lambda();
        let mut tree = GrowingTree::from_parent_vector(&self.start);
        let steps = horizon - t0;
        let mut record = EpisodeRecord {
            controller: controller.name(),
            t0,
            final_state: self.start.clone(),
            highlights: Vec::with_capacity(steps),
            accepted: Vec::with_capacity(steps),
            h_index: Vec::with_capacity(steps),
            end_cost: 0.0,
        };
        for t in t0..horizon {
            let step_seed = derive_seed(seed, &[t as u64]);
            let (highlight, step) = match *controller {
                Controller::Uncontrolled => {
                    let mut rng = substream(step_seed, &[USER_KEY]);
                    let label = sample_next(self.model, &tree, t, &mut rng)?;
                    (NO_NODE, UserStep { label, accepted: false })
                }
                Controller::KlOptimal { samples } => {
                    let label = self.kl_step(&policy, &tree, samples, lambda, step_seed)?;
                    (NO_NODE, UserStep { label, accepted: false })
                }
                Controller::ActionSelection {
                    compliance,
                    samples,
                } => {
                    let interaction = InteractionModel::new(compliance)?;
                    let choice = select_action(
                        &policy,
                        self.model,
                        self.cost,
                        &tree.to_parent_vector(),
                        horizon,
                        lambda,
                        samples,
                        interaction.acceptance(),
                        derive_seed(step_seed, &[SAMPLE_KEY]),
                    )?;
                    let mut rng = substream(step_seed, &[USER_KEY]);
                    let step =
                        step_user(&interaction, choice.action, self.model, &tree, t, &mut rng)?;
                    (choice.action, step)
                }
            };
            tree.push(step.label);
            record.highlights.push(highlight);
            record.accepted.push(step.accepted);
            record.h_index.push(tree.h_index());
            record.end_cost += self.cost.cost(&tree, t + 1);
        }
        record.final_state = tree.to_parent_vector();
        Ok(record)
    }

    fn kl_step(
        &self,
        policy: &ProposalPolicy<'_, M, F>,
        tree: &GrowingTree,
        samples: usize,
        lambda: f64,
        step_seed: u64,
    ) -> Result<Label> {
        let t = tree.time();
        let mut rng = substream(step_seed, &[DRAW_KEY]);
        if samples == 1 {
            let mut buf = StepBuffer::default();
            return policy.draw(tree, t, rng.random::<f64>(), &mut buf).map(|(label, _)| label);
        }
        let x = tree.to_parent_vector();
        let batch = sample_paths(
            policy,
            self.cost,
            &x,
            t,
            self.horizon(),
            samples,
            lambda,
            derive_seed(step_seed, &[SAMPLE_KEY]),
        )?;
        match normalized_weights(&batch) {
            Ok(w) => {
                let i = crate::growth_models::pick(&w, 1.0, &mut rng);
                Ok(batch.action(i, t))
            }
            Err(Error::DegenerateBatch) => {
                warn!("t = {t}: every path weight vanished; stepping with the proposal");
                let mut buf = StepBuffer::default();
                policy.step(tree, t, &mut buf)?;
                Ok(buf.labels[buf.sample(&mut rng)])
            }
            Err(e) => Err(e),
        }
    }

    /// Runs `n_episodes` per controller. Episode `e` of a controller uses the
    /// seed keyed by `(master_seed, controller name, e)`, so adding or
    /// removing controllers leaves the others unchanged.
    pub fn evaluate(
        &self,
        controllers: &[Controller],
        n_episodes: usize,
        master_seed: u64,
    ) -> Result<Evaluation> {
        if n_episodes == 0 {
            return Err(Error::InvalidParameter("episode count must be at least 1".into()));
        }
        let t0 = self.start.len();
        let h0 = self.start.h_index();
        let columns = controllers
            .iter()
            .map(|controller| {
                let key = name_key(&controller.name());
                let episodes = (0..n_episodes)
                    .into_par_iter()
                    .map(|e| self.run_episode(controller, derive_seed(master_seed, &[key, e as u64])))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ControllerSummary::new(controller.name(), t0, h0, episodes))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluation { columns })
    }
}

/// Per-time h-index statistics of one controller.
#[derive(Clone, Debug)]
pub struct ControllerSummary {
    pub name: String,
    pub t0: usize,
    /// Mean h-index at t0, t0+1, ..., horizon.
    pub mean: Vec<f64>,
    /// Standard error of the mean; absent for a single episode.
    pub stderr: Vec<Option<f64>>,
    pub episodes: Vec<EpisodeRecord>,
}

impl ControllerSummary {
    fn new(name: String, t0: usize, h0: u32, episodes: Vec<EpisodeRecord>) -> Self {
        let steps = episodes.first().map_or(0, |e| e.len());
        let n = episodes.len() as f64;
        let mut mean = Vec::with_capacity(steps + 1);
        let mut stderr = Vec::with_capacity(steps + 1);
        for s in 0..=steps {
            let value = |e: &EpisodeRecord| {
                if s == 0 {
                    h0 as f64
                } else {
                    e.h_index[s - 1] as f64
                }
            };
            let m = episodes.iter().map(value).sum::<f64>() / n;
            mean.push(m);
            stderr.push((episodes.len() > 1).then(|| {
                let var = episodes.iter().map(|e| (value(e) - m).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            }));
        }
        ControllerSummary {
            name,
            t0,
            mean,
            stderr,
            episodes,
        }
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_stderr(&self) -> Option<f64> {
        self.stderr.last().copied().flatten()
    }
}

/// One row of the exported statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub t: usize,
    pub controller: String,
    pub mean_h: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub columns: Vec<ControllerSummary>,
}

impl Evaluation {
    pub fn column(&self, name: &str) -> Option<&ControllerSummary> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Rows ordered by time, then by controller in evaluation order.
    pub fn rows(&self) -> Vec<EvaluationRow> {
        let len = self.columns.iter().map(|c| c.mean.len()).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(len * self.columns.len());
        for s in 0..len {
            for c in &self.columns {
                if let (Some(&mean_h), Some(&stderr)) = (c.mean.get(s), c.stderr.get(s)) {
                    rows.push(EvaluationRow {
                        t: c.t0 + s,
                        controller: c.name.clone(),
                        mean_h,
                        stderr,
                    });
                }
            }
        }
        rows
    }
}

/// Pooled standard error of the difference of two final means.
pub fn pooled_stderr(a: &ControllerSummary, b: &ControllerSummary) -> Option<f64> {
    Some((a.final_stderr()?.powi(2) + b.final_stderr()?.powi(2)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ce_trainer::DegreeHistogramFeatures;
    use crate::exact_solver::{StateLattice, DEFAULT_LAYER_CAP};
    use crate::growth_models::{
        transition_probs, HIndexCost, ThreadModel, ThreadModelParams, ToyModel,
    };
    use crate::path_sampler::ExactOptimalPolicy;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn thread_model() -> ThreadModel {
        ThreadModel::new(ThreadModelParams::default()).unwrap()
    }

    #[test]
    fn acceptance_probability() {
        assert_eq!(InteractionModel::new(1.0).unwrap().acceptance(), 0.5);
        assert_eq!(InteractionModel::new(0.0).unwrap().acceptance(), 0.0);
        assert_eq!(InteractionModel::new(f64::INFINITY).unwrap().acceptance(), 1.0);
        assert!(InteractionModel::new(1e9).unwrap().acceptance() > 1.0 - 1e-8);
        assert!(InteractionModel::new(-0.1).is_err());
        assert!(InteractionModel::new(f64::NAN).is_err());
    }

    #[test]
    fn acceptance_frequency_within_binomial_bounds() {
        let model = thread_model();
        let tree = GrowingTree::from_parent_vector(
            &ParentVector::from_entries(vec![1, 1, 2, 3]).unwrap(),
        );
        for c in [0.25, 1.0, 3.0] {
            let interaction = InteractionModel::new(c).unwrap();
            let p = interaction.acceptance();
            let n = 100_000;
            let mut rng = substream(11, &[c.to_bits()]);
            let hits = (0..n)
                .filter(|_| step_user(&interaction, 3, &model, &tree, 4, &mut rng).unwrap().accepted)
                .count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((hits - n as f64 * p).abs() < 4.0 * sigma, "c = {c}: {hits}");
        }
    }

    #[test]
    fn zero_compliance_steps_are_uncontrolled() {
        let model = thread_model();
        let tree = GrowingTree::from_parent_vector(&ParentVector::from_entries(vec![1, 1]).unwrap());
        let interaction = InteractionModel::new(0.0).unwrap();
        let mut a = substream(5, &[]);
        let mut counts = HashMap::new();
        let n = 40_000;
        for _ in 0..n {
            let step = step_user(&interaction, 2, &model, &tree, 2, &mut a).unwrap();
            assert!(!step.accepted);
            *counts.entry(step.label).or_insert(0usize) += 1;
        }
        for (label, p) in transition_probs(&model, &tree.to_parent_vector(), 2).unwrap() {
            let f = counts.get(&label).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 4.0 * sigma, "label {label}: {f} vs {p}");
        }
    }

    #[test]
    fn single_sample_kl_controller_steps_with_the_proposal() {
        let model = thread_model();
        let features = DegreeHistogramFeatures { k_max: 6 };
        let mut weights = ProposalWeights::zeros(0, 4, features.dim(), 0.2, features.name());
        weights.set(1, 3, -1.0);
        let start = ParentVector::from_entries(vec![1, 1, 2]).unwrap();
        let cost = HIndexCost { horizon: 4 };
        let cl = ClosedLoop {
            model: &model,
            cost: &cost,
            features: &features,
            weights: &weights,
            start: start.clone(),
        };
        let n = 40_000;
        let mut counts = HashMap::new();
        for e in 0..n {
            let record = cl.run_episode(&Controller::KlOptimal { samples: 1 }, e).unwrap();
            *counts.entry(*record.final_state.entries().last().unwrap()).or_insert(0usize) += 1;
        }
        let q = crate::ce_trainer::proposal_transition(&weights, &model, &features, &start, 3).unwrap();
        for (label, p) in q {
            let f = counts.get(&label).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 4.0 * sigma, "label {label}: {f} vs {p}");
        }
    }

    #[test]
    fn highlight_must_exist() {
        let model = thread_model();
        let tree = GrowingTree::new();
        let interaction = InteractionModel::new(1.0).unwrap();
        let mut rng = substream(0, &[]);
        assert!(step_user(&interaction, 2, &model, &tree, 0, &mut rng).is_err());
        assert!(step_user(&interaction, 1, &model, &tree, 0, &mut rng).is_ok());
    }

    #[test]
    fn equal_estimates_pick_lowest_label() {
        assert_eq!(choose_action(&[(3, 0.5), (1, 0.5), (2, 0.5)], 0.5), 1);
        assert_eq!(choose_action(&[(3, 0.1), (1, 0.5)], 0.5), 3);
        assert_eq!(choose_action(&[(3, 0.1), (1, 0.5)], 0.0), NO_NODE);
        assert_eq!(choose_action(&[], 1.0), NO_NODE);
    }

    proptest! {
        #[test]
        fn action_invariant_under_constant_shift(
            values in prop::collection::vec(-64i32..64, 1..12),
            shift in -1000i32..1000,
        ) {
            // eighths keep every sum exact
            let est: Vec<(Label, f64)> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as Label + 1, v as f64 / 8.0))
                .collect();
            let shifted: Vec<(Label, f64)> =
                est.iter().map(|&(l, v)| (l, v + shift as f64)).collect();
            prop_assert_eq!(choose_action(&est, 0.5), choose_action(&shifted, 0.5));
        }
    }

    /// Deterministic-control cost-to-go on the toy process by exhaustive
    /// recursion.
    fn bellman(model: &ToyModel, x: &ParentVector, memo: &mut HashMap<ParentVector, f64>) -> f64 {
        if let Some(&v) = memo.get(x) {
            return v;
        }
        let t = x.len();
        let r = crate::growth_models::toy_state_cost(model, x, t);
        let v = if t == model.horizon {
            r
        } else {
            let best = transition_probs(model, x, t)
                .unwrap()
                .into_iter()
                .filter(|&(_, p)| p > 0.0)
                .map(|(l, _)| bellman(model, &x.extend(l).unwrap(), memo))
                .fold(f64::INFINITY, f64::min);
            r + best
        };
        memo.insert(x.clone(), v);
        v
    }

    #[test]
    fn full_control_matches_bellman_argmin_on_toy() {
        let model = ToyModel::with_horizon(5);
        let start = model.initial_state();
        let lambda = 0.01;
        let lattice = StateLattice::build(&model, &model, &start, 1, 5, DEFAULT_LAYER_CAP).unwrap();
        let dp = lattice.solve(lambda).unwrap();
        let policy = ExactOptimalPolicy { dp: &dp };
        let mut memo = HashMap::new();
        let states: Vec<ParentVector> = ["1", "1 0", "1 1", "1 0 0", "1 1 0", "1 1 2", "1 1 1", "1 1 1 3"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let (mut runs, mut hits) = (0, 0);
        for (si, x) in states.iter().enumerate() {
            let t = x.len();
            let succ: Vec<(Label, f64)> = transition_probs(&model, x, t)
                .unwrap()
                .into_iter()
                .filter(|&(_, p)| p > 0.0)
                .map(|(l, _)| (l, bellman(&model, &x.extend(l).unwrap(), &mut memo)))
                .collect();
            let best = succ.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            for run in 0..5u64 {
                let choice =
                    select_action(&policy, &model, &model, x, 5, lambda, 10_000, 1.0, derive_seed(si as u64, &[run]))
                        .unwrap();
                let value = succ.iter().find(|s| s.0 == choice.action).unwrap().1;
                runs += 1;
                if value <= best + 1e-12 {
                    hits += 1;
                }
            }
        }
        assert!(hits as f64 >= 0.95 * runs as f64, "{hits}/{runs}");
    }

    fn thread_setup() -> (ThreadModel, HIndexCost, DegreeHistogramFeatures, ProposalWeights) {
        let model = thread_model();
        let features = DegreeHistogramFeatures::default();
        let weights = ProposalWeights::zeros(0, 20, features.dim(), 0.2, features.name());
        (model, HIndexCost { horizon: 20 }, features, weights)
    }

    #[test]
    fn episodes_are_reproducible_and_well_formed() {
        let (model, cost, features, weights) = thread_setup();
        let cl = ClosedLoop {
            model: &model,
            cost: &cost,
            features: &features,
            weights: &weights,
            start: ParentVector::new(),
        };
        for controller in [
            Controller::Uncontrolled,
            Controller::KlOptimal { samples: 50 },
            Controller::ActionSelection {
                compliance: 1.0,
                samples: 50,
            },
        ] {
            let a = cl.run_episode(&controller, 9).unwrap();
            let b = cl.run_episode(&controller, 9).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 20);
            assert_eq!(a.final_state.len(), 20);
            assert_eq!(a.final_state.node_count(), 21);
            assert!(a.h_index.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(a.end_cost, -(a.final_h_index() as f64));
            assert_eq!(a.final_h_index(), a.final_state.h_index());
            for (t, (&h, &acc)) in a.highlights.iter().zip(&a.accepted).enumerate() {
                if acc {
                    assert_eq!(a.final_state.entries()[t], h);
                }
            }
        }
    }

    #[test]
    fn evaluation_is_seed_isolated_and_deterministic() {
        let (model, cost, features, weights) = thread_setup();
        let cl = ClosedLoop {
            model: &model,
            cost: &cost,
            features: &features,
            weights: &weights,
            start: ParentVector::new(),
        };
        let ctl = [Controller::Uncontrolled, Controller::KlOptimal { samples: 20 }];
        let a = cl.evaluate(&ctl, 8, 3).unwrap();
        let b = cl.evaluate(&ctl[..1], 8, 3).unwrap();
        assert_eq!(a.columns[0].mean, b.columns[0].mean);
        assert_eq!(a.rows(), cl.evaluate(&ctl, 8, 3).unwrap().rows());
        assert_eq!(a.rows().len(), 2 * 21);
        let single = cl.evaluate(&ctl[..1], 1, 3).unwrap();
        assert!(single.columns[0].stderr.iter().all(Option::is_none));
        assert!(cl.evaluate(&ctl, 0, 3).is_err());
    }

    #[test]
    fn zero_compliance_matches_uncontrolled_statistically() {
        let model = thread_model();
        let cost = HIndexCost { horizon: 50 };
        let features = DegreeHistogramFeatures::default();
        let weights = ProposalWeights::zeros(0, 50, features.dim(), 0.2, features.name());
        let cl = ClosedLoop {
            model: &model,
            cost: &cost,
            features: &features,
            weights: &weights,
            start: ParentVector::new(),
        };
        let ev = cl
            .evaluate(
                &[
                    Controller::Uncontrolled,
                    Controller::ActionSelection {
                        compliance: 0.0,
                        samples: 100,
                    },
                ],
                1000,
                21,
            )
            .unwrap();
        let (a, b) = (&ev.columns[0], &ev.columns[1]);
        assert!(b.episodes.iter().all(|e| e.accepted.iter().all(|&x| !x)));
        let se = pooled_stderr(a, b).unwrap();
        assert!((a.final_mean() - b.final_mean()).abs() < 3.0 * se);
        assert!(a.final_stderr().unwrap() < 0.1);
        for e in a.episodes.iter().chain(&b.episodes) {
            assert!(e.final_h_index() <= 7);
        }
    }
}

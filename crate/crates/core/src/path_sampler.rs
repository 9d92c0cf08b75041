//! Path sampling under arbitrary policies, importance weights and the
//! estimators built on them.
//!
//! A batch stores, per path, the log combined weight
//! `log(p(path)/q(path)) + log φ(path)` with `φ = exp(−Σ r / λ)` summed over
//! the steps after the start state. Estimates are self-normalized, so the
//! weights never need a normalizing constant.

use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact_solver::DPTable;
use crate::growth_models::{pick_at, GrowthModel, StateCost};
use crate::rng::substream;
use crate::tree_state::{GrowingTree, Label, ParentVector};

/// Transition distributions at one step: candidate labels with the
/// uncontrolled probabilities `p` and the policy's probabilities `q`.
#[derive(Clone, Debug, Default)]
pub struct StepBuffer {
    pub labels: Vec<Label>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl StepBuffer {
    pub fn clear(&mut self) {
        self.labels.clear();
        self.p.clear();
        self.q.clear();
    }

    /// Samples an index from `q`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index_at(rng.random::<f64>())
    }

    /// Index of the candidate whose cumulative `q` interval contains `u`.
    #[inline]
    pub fn index_at(&self, mut u: f64) -> usize {
        for (i, &q) in self.q.iter().enumerate() {
            if u < q {
                return i;
            }
            u -= q;
        }
        self.q.iter().rposition(|&q| q > 0.0).unwrap_or(0)
    }
}

/// A (possibly controlled) transition law over the model's successors.
pub trait Policy: Send + Sync {
    /// Fills `buf` with the candidates at (`tree`, `t`), their uncontrolled
    /// probabilities and this policy's probabilities, both normalized.
    fn step(&self, tree: &GrowingTree, t: usize, buf: &mut StepBuffer) -> Result<()>;

    /// Draws one transition with the uniform `u`, returning the label and
    /// `log(p/q)` of the draw. `buf` is scratch space.
    fn draw(&self, tree: &GrowingTree, t: usize, u: f64, buf: &mut StepBuffer) -> Result<(Label, f64)> {
        self.step(tree, t, buf)?;
        let i = buf.index_at(u);
        let (p, q) = (buf.p[i], buf.q[i]);
        let log_ratio = if p != q { p.ln() - q.ln() } else { 0.0 };
        Ok((buf.labels[i], log_ratio))
    }

    fn name(&self) -> String;
}

/// The uncontrolled dynamics as a policy.
pub struct Uncontrolled<'a, M: ?Sized> {
    pub model: &'a M,
}

impl<'a, M: GrowthModel + ?Sized> Uncontrolled<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Uncontrolled { model }
    }
}

impl<M: GrowthModel + ?Sized> Policy for Uncontrolled<'_, M> {
    fn step(&self, tree: &GrowingTree, t: usize, buf: &mut StepBuffer) -> Result<()> {
        self.model.transition(tree, t, &mut buf.labels, &mut buf.p)?;
        buf.q.clear();
        buf.q.extend_from_slice(&buf.p);
        Ok(())
    }

    fn draw(&self, tree: &GrowingTree, t: usize, u: f64, buf: &mut StepBuffer) -> Result<(Label, f64)> {
        let total = self.model.weights(tree, t, &mut buf.labels, &mut buf.p)?;
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateModel { t });
        }
        Ok((buf.labels[pick_at(&buf.p, total, u)], 0.0))
    }

    fn name(&self) -> String {
        "uncontrolled".into()
    }
}

/// Samples from the exact KL-optimal transitions of a solved table.
pub struct ExactOptimalPolicy<'a> {
    pub dp: &'a DPTable,
}

impl Policy for ExactOptimalPolicy<'_> {
    fn step(&self, tree: &GrowingTree, _t: usize, buf: &mut StepBuffer) -> Result<()> {
        buf.clear();
        let state = self.dp.locate(tree.entries())?;
        self.dp.fill_transition(state, &mut buf.labels, &mut buf.p, &mut buf.q);
        Ok(())
    }

    fn name(&self) -> String {
        format!("exact_optimal(lambda={})", self.dp.lambda())
    }
}

/// Deterministic policy given by a choice function.
pub struct DeterministicPolicy<'a, M: ?Sized, F> {
    pub model: &'a M,
    pub choose: F,
}

impl<M, F> Policy for DeterministicPolicy<'_, M, F>
where
    M: GrowthModel + ?Sized,
    F: Fn(&GrowingTree, usize) -> Label + Send + Sync,
{
    fn step(&self, tree: &GrowingTree, t: usize, buf: &mut StepBuffer) -> Result<()> {
        self.model.transition(tree, t, &mut buf.labels, &mut buf.p)?;
        let label = (self.choose)(tree, t);
        let pos = buf
            .labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::Inconsistent { label })?;
        buf.q.clear();
        buf.q.resize(buf.labels.len(), 0.0);
        buf.q[pos] = 1.0;
        Ok(())
    }

    fn name(&self) -> String {
        "deterministic".into()
    }
}

/// M paths from a common start state with their combined log-weights.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    start: ParentVector,
    t0: usize,
    horizon: usize,
    lambda: f64,
    /// Row-major `M × (horizon − t0)` labels.
    labels: Vec<Label>,
    log_weights: Vec<f64>,
    /// Σ r over the steps after the start state, per path.
    path_costs: Vec<f64>,
    start_cost: f64,
    /// `ln M` for sampled batches; 0 when weights already carry path
    /// probabilities (enumeration).
    log_divisor: f64,
    origin: String,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn start(&self) -> &ParentVector {
        &self.start
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn steps(&self) -> usize {
        self.horizon - self.t0
    }

    pub fn path(&self, i: usize) -> &[Label] {
        let s = self.steps();
        &self.labels[i * s..(i + 1) * s]
    }

    /// Label chosen at time `t` (t0 ≤ t < horizon) on path `i`.
    #[inline]
    pub fn action(&self, i: usize, t: usize) -> Label {
        self.labels[i * self.steps() + (t - self.t0)]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn path_costs(&self) -> &[f64] {
        &self.path_costs
    }

    pub fn start_cost(&self) -> f64 {
        self.start_cost
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// Final state of path `i`.
    pub fn final_state(&self, i: usize) -> ParentVector {
        let mut entries = self.start.entries().to_vec();
        entries.extend_from_slice(self.path(i));
        ParentVector::from_entries(entries).expect("sampled paths are valid")
    }

    /// Replays path `i`, calling `visit(tree, t)` on each state from the
    /// start (at t0) to the end (at horizon).
    pub fn replay<F: FnMut(&GrowingTree, usize)>(&self, i: usize, mut visit: F) {
        let mut tree = GrowingTree::from_parent_vector(&self.start);
        visit(&tree, self.t0);
        for (s, &l) in self.path(i).iter().enumerate() {
            tree.push(l);
            visit(&tree, self.t0 + s + 1);
        }
    }
}

struct PathSample {
    labels: Vec<Label>,
    log_ratio: f64,
    cost: f64,
}

fn sample_one<P: Policy + ?Sized, C: StateCost + ?Sized, R: Rng>(
    policy: &P,
    cost: &C,
    start: &GrowingTree,
    t0: usize,
    horizon: usize,
    rng: &mut R,
    buf: &mut StepBuffer,
) -> Result<PathSample> {
    let mut tree = start.clone();
    let mut labels = Vec::with_capacity(horizon - t0);
    let mut log_ratio = 0.0;
    let mut total = 0.0;
    for t in t0..horizon {
        let (label, ratio) = policy.draw(&tree, t, rng.random::<f64>(), buf)?;
        log_ratio += ratio;
        tree.push(label);
        labels.push(label);
        if !cost.is_zero_at(t + 1) {
            total += cost.cost(&tree, t + 1);
        }
    }
    Ok(PathSample {
        labels,
        log_ratio,
        cost: total,
    })
}

fn check_horizon(start: &ParentVector, t0: usize, horizon: usize) -> Result<()> {
    if horizon < t0 {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} precedes start time {t0}"
        )));
    }
    if start.len() != t0 {
        return Err(Error::InvalidParameter(format!(
            "start state has {} entries but start time is {t0}",
            start.len()
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {lambda}"
        )))
    }
}

/// Samples `m` paths from `policy`; path `i` draws from the stream keyed by
/// `(seed, i)`, so the batch does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn sample_paths<P: Policy + ?Sized, C: StateCost + ?Sized>(
    policy: &P,
    cost: &C,
    start: &ParentVector,
    t0: usize,
    horizon: usize,
    m: usize,
    lambda: f64,
    seed: u64,
) -> Result<TrajectoryBatch> {
    check_horizon(start, t0, horizon)?;
    check_lambda(lambda)?;
    if m == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let tree = GrowingTree::from_parent_vector(start);
    let samples: Vec<PathSample> = (0..m)
        .into_par_iter()
        .map_init(StepBuffer::default, |buf, i| {
            let mut rng = substream(seed, &[i as u64]);
            sample_one(policy, cost, &tree, t0, horizon, &mut rng, buf)
        })
        .collect::<Result<_>>()?;
    Ok(assemble(
        start,
        t0,
        horizon,
        lambda,
        cost,
        samples,
        (m as f64).ln(),
        policy.name(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble<C: StateCost + ?Sized>(
    start: &ParentVector,
    t0: usize,
    horizon: usize,
    lambda: f64,
    cost: &C,
    samples: Vec<PathSample>,
    log_divisor: f64,
    origin: String,
) -> TrajectoryBatch {
    let mut labels = Vec::with_capacity(samples.len() * (horizon - t0));
    let mut log_weights = Vec::with_capacity(samples.len());
    let mut path_costs = Vec::with_capacity(samples.len());
    for s in samples {
        labels.extend_from_slice(&s.labels);
        log_weights.push(s.log_ratio - s.cost / lambda);
        path_costs.push(s.cost);
    }
    TrajectoryBatch {
        start: start.clone(),
        t0,
        horizon,
        lambda,
        labels,
        log_weights,
        path_costs,
        start_cost: cost.cost(&GrowingTree::from_parent_vector(start), t0),
        log_divisor,
        origin,
    }
}

/// One enumerated path with its probabilities under the model and the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedPath {
    pub labels: Vec<Label>,
    pub log_p: f64,
    pub log_q: f64,
    /// Σ r over the steps after the start state.
    pub cost: f64,
}

/// All paths with positive policy probability, depth first in candidate order.
pub fn enumerate_paths<P: Policy + ?Sized, C: StateCost + ?Sized>(
    policy: &P,
    cost: &C,
    start: &ParentVector,
    t0: usize,
    horizon: usize,
    cap: usize,
) -> Result<Vec<EnumeratedPath>> {
    check_horizon(start, t0, horizon)?;
    let mut out = Vec::new();
    let mut tree = GrowingTree::from_parent_vector(start);
    let mut labels = Vec::new();
    enumerate_rec(
        policy, cost, &mut tree, t0, horizon, cap, &mut labels, 0.0, 0.0, 0.0, &mut out,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rec<P: Policy + ?Sized, C: StateCost + ?Sized>(
    policy: &P,
    cost: &C,
    tree: &mut GrowingTree,
    t: usize,
    horizon: usize,
    cap: usize,
    labels: &mut Vec<Label>,
    log_p: f64,
    log_q: f64,
    acc: f64,
    out: &mut Vec<EnumeratedPath>,
) -> Result<()> {
    if t == horizon {
        if out.len() >= cap {
            return Err(Error::Capacity { layer: t, cap });
        }
        out.push(EnumeratedPath {
            labels: labels.clone(),
            log_p,
            log_q,
            cost: acc,
        });
        return Ok(());
    }
    let mut buf = StepBuffer::default();
    policy.step(tree, t, &mut buf)?;
    for i in 0..buf.labels.len() {
        if buf.q[i] <= 0.0 {
            continue;
        }
        tree.push(buf.labels[i]);
        labels.push(buf.labels[i]);
        let r = if cost.is_zero_at(t + 1) {
            0.0
        } else {
            cost.cost(tree, t + 1)
        };
        enumerate_rec(
            policy,
            cost,
            tree,
            t + 1,
            horizon,
            cap,
            labels,
            log_p + buf.p[i].ln(),
            log_q + buf.q[i].ln(),
            acc + r,
            out,
        )?;
        labels.pop();
        tree.pop();
    }
    Ok(())
}

/// Exhaustive "batch" holding every path of `policy` with weight
/// `q(path)·(p/q)·φ`; estimators applied to it are exact.
pub fn enumerate_batch<P: Policy + ?Sized, C: StateCost + ?Sized>(
    policy: &P,
    cost: &C,
    start: &ParentVector,
    t0: usize,
    horizon: usize,
    lambda: f64,
    cap: usize,
) -> Result<TrajectoryBatch> {
    check_lambda(lambda)?;
    let paths = enumerate_paths(policy, cost, start, t0, horizon, cap)?;
    let samples = paths
        .into_iter()
        .map(|p| PathSample {
            labels: p.labels,
            log_ratio: p.log_q + (p.log_p - p.log_q),
            cost: p.cost,
        })
        .collect();
    Ok(assemble(
        start,
        t0,
        horizon,
        lambda,
        cost,
        samples,
        0.0,
        format!("enumerated:{}", policy.name()),
    ))
}

/// Exact expected total cost r(x0,t0) + E_q[Σ r] by path enumeration.
pub fn brute_force_expected_cost<P: Policy + ?Sized, C: StateCost + ?Sized>(
    policy: &P,
    cost: &C,
    start: &ParentVector,
    t0: usize,
    horizon: usize,
    cap: usize,
) -> Result<f64> {
    let paths = enumerate_paths(policy, cost, start, t0, horizon, cap)?;
    let start_cost = cost.cost(&GrowingTree::from_parent_vector(start), t0);
    Ok(start_cost + paths.iter().map(|p| p.log_q.exp() * p.cost).sum::<f64>())
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized weights `w̄_i`, summing to one.
pub fn normalized_weights(batch: &TrajectoryBatch) -> Result<Vec<f64>> {
    normalize_log_weights(&batch.log_weights)
}

pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let mut w: Vec<f64> = log_w.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// (Σw)² / Σw² evaluated from log-weights.
pub fn effective_sample_size_of(log_w: &[f64]) -> Result<f64> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &x in log_w {
        let w = (x - m).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok((s1 * s1 / s2).clamp(1.0, log_w.len() as f64))
}

pub fn effective_sample_size(batch: &TrajectoryBatch) -> Result<f64> {
    effective_sample_size_of(&batch.log_weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    /// Delta-method standard error; zero for enumerated batches.
    pub std_error: f64,
}

/// Ĵ = r(x,t) − λ log((1/M) Σ w).
pub fn estimate_cost_to_go(batch: &TrajectoryBatch) -> Result<CostEstimate> {
    let lse = log_sum_exp(&batch.log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let value = batch.start_cost - batch.lambda * (lse - batch.log_divisor);
    let std_error = if batch.log_divisor == 0.0 {
        0.0
    } else {
        // sd(w)/mean(w) from the normalized weights
        let m = batch.len() as f64;
        let w = normalized_weights(batch)?;
        let var = w.iter().map(|&x| (m * x - 1.0).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        batch.lambda * (var / m).sqrt()
    };
    Ok(CostEstimate { value, std_error })
}

/// Systematic resampling indices: one uniform offset `u` in [0, 1) and `m`
/// evenly spaced pointers into the cumulative weights.
pub fn systematic_indices(weights: &[f64], m: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(m);
    let step = 1.0 / m as f64;
    let mut cum = 0.0;
    let mut j = 0;
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    for k in 0..m {
        let pointer = (u + k as f64) * step;
        while j < last && cum + weights[j] <= pointer {
            cum += weights[j];
            j += 1;
        }
        out.push(j);
    }
    out
}

/// Resamples the batch to `M` unweighted paths.
pub fn systematic_resample<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    let w = normalized_weights(batch)?;
    let idx = systematic_indices(&w, batch.len(), rng.random::<f64>());
    let s = batch.steps();
    let mut labels = Vec::with_capacity(batch.labels.len());
    let mut path_costs = Vec::with_capacity(idx.len());
    for &i in &idx {
        labels.extend_from_slice(batch.path(i));
        path_costs.push(batch.path_costs[i]);
    }
    debug_assert_eq!(labels.len(), idx.len() * s);
    Ok(TrajectoryBatch {
        start: batch.start.clone(),
        t0: batch.t0,
        horizon: batch.horizon,
        lambda: batch.lambda,
        labels,
        log_weights: vec![0.0; idx.len()],
        path_costs,
        start_cost: batch.start_cost,
        log_divisor: (idx.len() as f64).ln(),
        origin: format!("resampled:{}", batch.origin),
    })
}

/// Weighted distribution of the first step, sorted by label. For a resampled
/// batch this is the empirical frequency.
pub fn first_step_marginal(batch: &TrajectoryBatch) -> Result<Vec<(Label, f64)>> {
    if batch.steps() == 0 {
        return Ok(Vec::new());
    }
    let w = normalized_weights(batch)?;
    let mut acc: Vec<(Label, f64)> = Vec::new();
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let l = batch.action(i, batch.t0);
        match acc.binary_search_by_key(&l, |&(k, _)| k) {
            Ok(pos) => acc[pos].1 += wi,
            Err(pos) => acc.insert(pos, (l, wi)),
        }
    }
    Ok(acc)
}

/// Ĵ(x′) = −λ log(û(x′)/p(x′)) on the marginal's support, up to a shared
/// constant.
pub fn successor_cost_estimates<M: GrowthModel + ?Sized>(
    marginal: &[(Label, f64)],
    model: &M,
    tree: &GrowingTree,
    t: usize,
    lambda: f64,
) -> Result<Vec<(Label, f64)>> {
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    model.transition(tree, t, &mut labels, &mut probs)?;
    marginal
        .iter()
        .filter(|&&(_, u)| u > 0.0)
        .map(|&(l, u)| {
            let p = labels
                .iter()
                .position(|&c| c == l)
                .map(|i| probs[i])
                .filter(|&p| p > 0.0)
                .ok_or(Error::Inconsistent { label: l })?;
            Ok((l, -lambda * (u / p).ln()))
        })
        .collect()
}

/// Label with the smallest estimate; the lowest label wins ties.
pub fn argmin_successor(estimates: &[(Label, f64)]) -> Option<Label> {
    estimates
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(l, _)| l)
}

/// Summary row of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchStats {
    pub effss: f64,
    pub cost_to_go: f64,
    pub min_weight: f64,
    pub max_weight: f64,
}

pub fn batch_stats(batch: &TrajectoryBatch) -> Result<BatchStats> {
    let w = normalized_weights(batch)?;
    Ok(BatchStats {
        effss: effective_sample_size(batch)?,
        cost_to_go: estimate_cost_to_go(batch)?.value,
        min_weight: w.iter().copied().fold(f64::INFINITY, f64::min),
        max_weight: w.iter().copied().fold(0.0, f64::max),
    })
}

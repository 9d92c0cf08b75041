//! Cross-entropy adaptation of a feature-parametrized importance sampler.
//!
//! The proposal is `ũ_ω(x′|x,t) ∝ p(x′|x) exp(−ω(t)·ψ(x′)/λ)`. A part of
//! `ψ(x′)` shared by every candidate at a step cancels from both the
//! proposal and the gradient, so feature maps may report `ψ(x′) − ψ(x)`.
//!
//! The gradient is taken of the cross entropy `−E_{u*}[log ũ_ω(path)]`
//! between the optimal path law and the proposal; for the step-normalized
//! proposal it equals
//! `λ⁻¹ (E_w[ψ_k(x_{t+1})] − E_w[Σ_{x′} ũ(x′|x_t) ψ_k(x′)])`
//! with self-normalized importance weights `w`. Updates descend it.

use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact_solver::{StateLattice, StateRef};
use crate::growth_models::{GrowthModel, StateCost};
use crate::path_sampler::{
    effective_sample_size, estimate_cost_to_go, normalized_weights, sample_paths, Policy,
    StepBuffer, TrajectoryBatch,
};
use crate::rng::derive_seed;
use crate::tree_state::{GrowingTree, Label, ParentVector, DEFAULT_K_MAX, NO_NODE};

/// Features of successor states, given as their change over one transition.
pub trait FeatureMap: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// Calls `f(candidate, k, value)` for the nonzero features of each
    /// candidate successor (indexed as in `labels`), up to a vector shared
    /// by all candidates.
    fn visit_deltas(
        &self,
        tree: &GrowingTree,
        t: usize,
        labels: &[Label],
        f: &mut dyn FnMut(usize, usize, f64),
    ) -> Result<()>;

    /// When the feature change of attaching to a node depends only on that
    /// node's degree `d`, returns `ω·Δψ` for d = 0..=max_degree (the "no
    /// addition" change is zero).
    fn degree_costs(&self, _row: &[f64], _max_degree: usize) -> Option<Vec<f64>> {
        None
    }

    /// When the feature change of attaching to a node depends only on that
    /// node's degree `d`, calls `f(k, value)` for its nonzero entries and
    /// returns true.
    fn degree_delta(&self, _d: usize, _f: &mut dyn FnMut(usize, f64)) -> bool {
        false
    }
}

/// Degree histogram of the successor tree: bins for degrees 1..=k_max plus an
/// overflow bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegreeHistogramFeatures {
    pub k_max: usize,
}

impl Default for DegreeHistogramFeatures {
    fn default() -> Self {
        DegreeHistogramFeatures {
            k_max: DEFAULT_K_MAX,
        }
    }
}

impl DegreeHistogramFeatures {
    /// Feature index of degree `k ≥ 1`.
    #[inline]
    pub fn bin(&self, k: usize) -> usize {
        k.min(self.k_max + 1) - 1
    }

    /// Change of the histogram when a leaf attaches to a node of degree `d`.
    fn attach_delta(&self, d: usize, mut f: impl FnMut(usize, f64)) {
        f(self.bin(1), 1.0);
        if d >= 1 {
            f(self.bin(d), -1.0);
        }
        f(self.bin(d + 1), 1.0);
    }
}

impl FeatureMap for DegreeHistogramFeatures {
    fn dim(&self) -> usize {
        self.k_max + 1
    }

    fn name(&self) -> String {
        format!("degree_histogram(k_max={})", self.k_max)
    }

    fn visit_deltas(
        &self,
        tree: &GrowingTree,
        _t: usize,
        labels: &[Label],
        f: &mut dyn FnMut(usize, usize, f64),
    ) -> Result<()> {
        for (c, &l) in labels.iter().enumerate() {
            if l != NO_NODE {
                self.attach_delta(tree.degree(l) as usize, |k, v| f(c, k, v));
            }
        }
        Ok(())
    }

    fn degree_delta(&self, d: usize, f: &mut dyn FnMut(usize, f64)) -> bool {
        self.attach_delta(d, f);
        true
    }

    fn degree_costs(&self, row: &[f64], max_degree: usize) -> Option<Vec<f64>> {
        Some(
            (0..=max_degree)
                .map(|d| {
                    let mut s = 0.0;
                    self.attach_delta(d, |k, v| s += row[k] * v);
                    s
                })
                .collect(),
        )
    }
}

/// One-hot features over the reachable states of a solved lattice: feature
/// `k` at time `t` is the indicator of the `k`-th state of layer `t + 1`.
#[derive(Clone, Debug)]
pub struct TabularFeatures {
    lattice: Arc<StateLattice>,
    dim: usize,
}

impl TabularFeatures {
    pub fn new(lattice: Arc<StateLattice>) -> Self {
        let dim = lattice.layer_sizes().into_iter().skip(1).max().unwrap_or(0);
        TabularFeatures { lattice, dim }
    }

    pub fn lattice(&self) -> &Arc<StateLattice> {
        &self.lattice
    }
}

impl FeatureMap for TabularFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        "tabular".into()
    }

    fn visit_deltas(
        &self,
        tree: &GrowingTree,
        _t: usize,
        labels: &[Label],
        f: &mut dyn FnMut(usize, usize, f64),
    ) -> Result<()> {
        let s = self.lattice.locate(tree.entries())?;
        for child in self.lattice.children(s) {
            let l = self.lattice.label(StateRef {
                layer: s.layer + 1,
                index: child,
            });
            let c = labels
                .iter()
                .position(|&x| x == l)
                .ok_or(Error::Inconsistent { label: l })?;
            f(c, child, 1.0);
        }
        Ok(())
    }
}

/// Time-indexed proposal weights ω_k(t), t0 ≤ t < horizon.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProposalWeights {
    omega: Vec<f64>,
    t0: usize,
    horizon: usize,
    dim: usize,
    lambda: f64,
    feature: String,
}

impl ProposalWeights {
    /// All-zero weights, under which the proposal is the uncontrolled model.
    pub fn zeros(t0: usize, horizon: usize, dim: usize, lambda: f64, feature: String) -> Self {
        ProposalWeights {
            omega: vec![0.0; (horizon - t0) * dim],
            t0,
            horizon,
            dim,
            lambda,
            feature,
        }
    }

    pub fn from_rows(
        t0: usize,
        rows: Vec<Vec<f64>>,
        lambda: f64,
        feature: String,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParameter("weight rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite".into()));
        }
        Ok(ProposalWeights {
            t0,
            horizon: t0 + rows.len(),
            dim,
            lambda,
            feature,
            omega: rows.into_iter().flatten().collect(),
        })
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let i = (t - self.t0) * self.dim;
        &self.omega[i..i + self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        let i = (t - self.t0) * self.dim;
        &mut self.omega[i..i + self.dim]
    }

    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.row(t)[k]
    }

    pub fn set(&mut self, k: usize, t: usize, value: f64) {
        self.row_mut(t)[k] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.omega
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.omega
            .chunks(self.dim.max(1))
            .enumerate()
            .map(move |(i, r)| (self.t0 + i, r))
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(|&v| v == 0.0)
    }

    /// Feature index of the most negative weight at time `t` (lowest index
    /// on ties).
    pub fn argmin_feature(&self, t: usize) -> usize {
        let row = self.row(t);
        (0..row.len())
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
            .unwrap_or(0)
    }
}

/// The importance sampler ũ_ω as a policy.
pub struct ProposalPolicy<'a, M: ?Sized, F: ?Sized> {
    model: &'a M,
    features: &'a F,
    weights: &'a ProposalWeights,
    degree_factors: Option<Vec<DegreeFactors>>,
}

/// exp(−(ω(t)·Δψ − shift)/λ) per attachment degree and for "no addition",
/// with one shift per time step so every factor is at most 1.
#[derive(Clone, Debug)]
struct DegreeFactors {
    attach: Vec<f64>,
    no_add: f64,
}

impl<'a, M: GrowthModel + ?Sized, F: FeatureMap + ?Sized> ProposalPolicy<'a, M, F> {
    pub fn new(model: &'a M, features: &'a F, weights: &'a ProposalWeights) -> Result<Self> {
        if features.dim() != weights.dim() {
            return Err(Error::InvalidParameter(format!(
                "feature dimension {} does not match weight dimension {}",
                features.dim(),
                weights.dim()
            )));
        }
        let max_degree = weights.horizon() + 1;
        let lambda = weights.lambda();
        let degree_factors = (weights.t0()..weights.horizon())
            .map(|t| {
                let costs = features.degree_costs(weights.row(t), max_degree)?;
                let shift = costs.iter().copied().fold(0.0, f64::min);
                Some(DegreeFactors {
                    attach: costs.iter().map(|c| (-(c - shift) / lambda).exp()).collect(),
                    no_add: (shift / lambda).exp(),
                })
            })
            .collect::<Option<Vec<_>>>();
        Ok(ProposalPolicy {
            model,
            features,
            weights,
            degree_factors,
        })
    }

    pub fn weights(&self) -> &ProposalWeights {
        self.weights
    }

    #[inline]
    fn factor(&self, f: &DegreeFactors, tree: &GrowingTree, label: Label) -> f64 {
        if label == NO_NODE {
            f.no_add
        } else {
            f.attach.get(tree.degree(label) as usize).copied().unwrap_or(0.0)
        }
    }

    fn generic_q(&self, tree: &GrowingTree, t: usize, buf: &mut StepBuffer) -> Result<()> {
        let row = self.weights.row(t);
        buf.q.clear();
        buf.q.resize(buf.labels.len(), 0.0);
        let q = &mut buf.q;
        self.features
            .visit_deltas(tree, t, &buf.labels, &mut |c, k, v| q[c] += row[k] * v)?;
        let lambda = self.weights.lambda();
        let mut best = f64::NEG_INFINITY;
        for (s, &p) in q.iter_mut().zip(&buf.p) {
            *s = if p > 0.0 { p.ln() - *s / lambda } else { f64::NEG_INFINITY };
            best = best.max(*s);
        }
        let mut total = 0.0;
        for s in q.iter_mut() {
            *s = (*s - best).exp();
            total += *s;
        }
        q.iter_mut().for_each(|s| *s /= total);
        Ok(())
    }
}

impl<M: GrowthModel + ?Sized, F: FeatureMap + ?Sized> Policy for ProposalPolicy<'_, M, F> {
    fn step(&self, tree: &GrowingTree, t: usize, buf: &mut StepBuffer) -> Result<()> {
        self.model.transition(tree, t, &mut buf.labels, &mut buf.p)?;
        if let Some(factors) = &self.degree_factors {
            let f = &factors[t - self.weights.t0()];
            buf.q.clear();
            let mut total = 0.0;
            for (&l, &p) in buf.labels.iter().zip(&buf.p) {
                let q = p * self.factor(f, tree, l);
                buf.q.push(q);
                total += q;
            }
            if total > 0.0 && total.is_finite() {
                buf.q.iter_mut().for_each(|q| *q /= total);
                return Ok(());
            }
        }
        self.generic_q(tree, t, buf)
    }

    fn draw(&self, tree: &GrowingTree, t: usize, u: f64, buf: &mut StepBuffer) -> Result<(Label, f64)> {
        if let Some(factors) = &self.degree_factors {
            // unnormalized: log(p/q) = log(Z_q/Z_p) − log factor; `q` holds
            // cumulative sums for a binary-search draw
            let f = &factors[t - self.weights.t0()];
            if let Some((z_p, z_q)) = self.model.degree_tilted(tree, t, &f.attach, &mut buf.q) {
                if let Some(draw) = draw_cumulative(&buf.q, z_p, z_q, u, |i| {
                    let label = i as Label + 1;
                    (label, self.factor(f, tree, label))
                }) {
                    return Ok(draw);
                }
            }
            let z_p = self.model.weights(tree, t, &mut buf.labels, &mut buf.p)?;
            buf.q.resize(buf.labels.len(), 0.0);
            let mut z_q = 0.0;
            for ((c, &l), &w) in buf.q.iter_mut().zip(&buf.labels).zip(&buf.p) {
                z_q += w * self.factor(f, tree, l);
                *c = z_q;
            }
            let labels = &buf.labels;
            if let Some(draw) = draw_cumulative(&buf.q, z_p, z_q, u, |i| {
                (labels[i], self.factor(f, tree, labels[i]))
            }) {
                return Ok(draw);
            }
        }
        self.step(tree, t, buf)?;
        let i = buf.index_at(u);
        let (p, q) = (buf.p[i], buf.q[i]);
        Ok((buf.labels[i], if p != q { p.ln() - q.ln() } else { 0.0 }))
    }

    fn name(&self) -> String {
        format!("proposal({})", self.features.name())
    }
}

/// Normalized ũ_ω(·|x,t) as (label, probability) pairs.
pub fn proposal_transition<M: GrowthModel + ?Sized, F: FeatureMap + ?Sized>(
    weights: &ProposalWeights,
    model: &M,
    features: &F,
    x: &ParentVector,
    t: usize,
) -> Result<Vec<(Label, f64)>> {
    let policy = ProposalPolicy::new(model, features, weights)?;
    let tree = GrowingTree::from_parent_vector(x);
    let mut buf = StepBuffer::default();
    policy.step(&tree, t, &mut buf)?;
    Ok(buf.labels.into_iter().zip(buf.q).collect())
}

/// Inverse-CDF draw from cumulative tilted weights; `candidate(i)` gives the
/// label and tilt factor of index `i`. Returns the label and `log(p/q)`.
#[inline]
fn draw_cumulative(
    cum: &[f64],
    z_p: f64,
    z_q: f64,
    u: f64,
    candidate: impl Fn(usize) -> (Label, f64),
) -> Option<(Label, f64)> {
    if !(z_p > 0.0 && z_q > 0.0 && z_q.is_finite()) {
        return None;
    }
    let target = u * z_q;
    let last = cum.partition_point(|&c| c < z_q);
    let i = cum.partition_point(|&c| c <= target).min(last);
    let (label, factor) = candidate(i);
    let ratio = if z_q == z_p && factor == 1.0 {
        0.0
    } else {
        (z_q / z_p).ln() - factor.ln()
    };
    Some((label, ratio))
}

const CHUNK: usize = 64;

/// Gradient of the cross entropy with respect to every ω_k(t), estimated
/// from a batch drawn from `policy` (row-major over t, then k).
pub fn ce_gradient_all<M: GrowthModel + ?Sized, F: FeatureMap + ?Sized>(
    policy: &ProposalPolicy<'_, M, F>,
    batch: &TrajectoryBatch,
) -> Result<Vec<f64>> {
    let w = normalized_weights(batch)?;
    let weights = policy.weights;
    if batch.t0() != weights.t0() || batch.horizon() != weights.horizon() {
        return Err(Error::InvalidParameter(
            "batch and weights cover different time ranges".into(),
        ));
    }
    let dim = weights.dim();
    let size = weights.as_slice().len();
    let inv_lambda = 1.0 / weights.lambda();
    let by_degree = policy.features.degree_delta(0, &mut |_, _| {});
    // fixed chunks summed in order keep the result independent of the
    // worker count
    let partials: Vec<Vec<f64>> = (0..batch.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; size];
            let mut buf = StepBuffer::default();
            let mut masses: Vec<f64> = Vec::new();
            for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(batch.len()) {
                let wi = w[i];
                if wi == 0.0 {
                    continue;
                }
                let mut tree = GrowingTree::from_parent_vector(batch.start());
                for t in batch.t0()..batch.horizon() {
                    policy.step(&tree, t, &mut buf)?;
                    let chosen = batch.action(i, t);
                    let ci = buf
                        .labels
                        .iter()
                        .position(|&l| l == chosen)
                        .ok_or(Error::Inconsistent { label: chosen })?;
                    let row = &mut acc[(t - weights.t0()) * dim..(t - weights.t0() + 1) * dim];
                    let q = &buf.q;
                    let scale = wi * inv_lambda;
                    if by_degree {
                        // ψ(x′) depends only on the parent's degree: pool q by degree
                        masses.clear();
                        for (&l, &qc) in buf.labels.iter().zip(q) {
                            if l != NO_NODE && qc > 0.0 {
                                let d = tree.degree(l) as usize;
                                if d >= masses.len() {
                                    masses.resize(d + 1, 0.0);
                                }
                                masses[d] += qc;
                            }
                        }
                        for (d, &m) in masses.iter().enumerate() {
                            if m > 0.0 {
                                policy.features.degree_delta(d, &mut |k, v| row[k] -= scale * m * v);
                            }
                        }
                        if chosen != NO_NODE {
                            let d = tree.degree(chosen) as usize;
                            policy.features.degree_delta(d, &mut |k, v| row[k] += scale * v);
                        }
                    } else {
                        policy.features.visit_deltas(&tree, t, &buf.labels, &mut |c, k, v| {
                            let indicator = if c == ci { 1.0 } else { 0.0 };
                            row[k] += scale * (indicator - q[c]) * v;
                        })?;
                    }
                    tree.push(chosen);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; size];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    Ok(grad)
}

/// Single gradient component ∂/∂ω_k(t).
pub fn ce_gradient<M: GrowthModel + ?Sized, F: FeatureMap + ?Sized>(
    policy: &ProposalPolicy<'_, M, F>,
    batch: &TrajectoryBatch,
    k: usize,
    t: usize,
) -> Result<f64> {
    let g = ce_gradient_all(policy, batch)?;
    Ok(g[(t - policy.weights.t0()) * policy.weights.dim() + k])
}

/// Cross entropy `−Σ_i w̄_i log ũ_ω(path_i)` of the batch's weighted paths
/// under `policy`; exact when the batch is an enumeration.
pub fn cross_entropy<P: Policy + ?Sized>(policy: &P, batch: &TrajectoryBatch) -> Result<f64> {
    let w = normalized_weights(batch)?;
    let mut buf = StepBuffer::default();
    let mut total = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let mut tree = GrowingTree::from_parent_vector(batch.start());
        let mut log_q = 0.0;
        for t in batch.t0()..batch.horizon() {
            policy.step(&tree, t, &mut buf)?;
            let chosen = batch.action(i, t);
            let ci = buf
                .labels
                .iter()
                .position(|&l| l == chosen)
                .ok_or(Error::Inconsistent { label: chosen })?;
            log_q += buf.q[ci].ln();
            tree.push(chosen);
        }
        total -= wi * log_q;
    }
    Ok(total)
}

/// Diagnostics of one CE iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterStats {
    pub iteration: usize,
    pub effss: f64,
    /// EffSS as a fraction of M.
    pub effss_fraction: f64,
    pub cost_to_go: f64,
    pub cost_to_go_se: f64,
    pub grad_norm: f64,
    pub eta: f64,
}

/// A CE training problem: dynamics, cost, features and the start state.
pub struct CeProblem<'a, M: ?Sized, C: ?Sized, F: ?Sized> {
    pub model: &'a M,
    pub cost: &'a C,
    pub features: &'a F,
    pub start: ParentVector,
    pub t0: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub samples: usize,
    /// Learning rate; defaults to 0.1·λ.
    pub eta: Option<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub clip_norm: f64,
    /// EffSS fraction below which an iteration logs a warning.
    pub effss_floor: f64,
    /// Consecutive gradient-norm increases treated as divergence.
    pub divergence_window: usize,
    /// Learning-rate halvings allowed before training fails.
    pub max_decays: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            samples: 10_000,
            eta: None,
            max_iters: 100,
            grad_tol: 1e-6,
            plateau_window: 10,
            plateau_tol: 0.01,
            clip_norm: 100.0,
            effss_floor: 0.01,
            divergence_window: 8,
            max_decays: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "learning rate must be non-negative, got {eta}"
                )));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParameter("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    GradientTolerance,
    EffssPlateau,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the iteration with the highest EffSS.
    pub best: ProposalWeights,
    pub best_iteration: usize,
    pub last: ProposalWeights,
    pub log: Vec<IterStats>,
    pub stop: StopReason,
}

impl<M, C, F> CeProblem<'_, M, C, F>
where
    M: GrowthModel + ?Sized,
    C: StateCost + ?Sized,
    F: FeatureMap + ?Sized,
{
    pub fn zero_weights(&self, lambda: f64) -> ProposalWeights {
        ProposalWeights::zeros(
            self.t0,
            self.horizon,
            self.features.dim(),
            lambda,
            self.features.name(),
        )
    }

    /// Samples `m` paths from the proposal under `weights`.
    pub fn sample(&self, weights: &ProposalWeights, m: usize, seed: u64) -> Result<TrajectoryBatch> {
        let policy = ProposalPolicy::new(self.model, self.features, weights)?;
        sample_paths(
            &policy,
            self.cost,
            &self.start,
            self.t0,
            self.horizon,
            m,
            weights.lambda(),
            seed,
        )
    }

    /// One iteration: sample, estimate the gradient, step ω ← ω − η·g with
    /// the gradient clipped to `clip_norm`.
    pub fn iterate(
        &self,
        weights: &ProposalWeights,
        m: usize,
        eta: f64,
        clip_norm: f64,
        seed: u64,
    ) -> Result<(ProposalWeights, IterStats, Vec<f64>)> {
        let policy = ProposalPolicy::new(self.model, self.features, weights)?;
        let batch = sample_paths(
            &policy,
            self.cost,
            &self.start,
            self.t0,
            self.horizon,
            m,
            weights.lambda(),
            seed,
        )?;
        let effss = effective_sample_size(&batch)?;
        let estimate = estimate_cost_to_go(&batch)?;
        let grad = ce_gradient_all(&policy, &batch)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        let mut next = weights.clone();
        if eta != 0.0 {
            for (w, g) in next.omega.iter_mut().zip(&grad) {
                *w -= eta * scale * g;
            }
        }
        let stats = IterStats {
            iteration: 0,
            effss,
            effss_fraction: effss / m as f64,
            cost_to_go: estimate.value,
            cost_to_go_se: estimate.std_error,
            grad_norm: norm,
            eta,
        };
        Ok((next, stats, grad))
    }

    /// Runs CE iterations from `w0` until the gradient norm drops below
    /// tolerance, EffSS plateaus or the iteration budget is spent.
    pub fn train(&self, w0: &ProposalWeights, config: &TrainConfig) -> Result<TrainOutcome> {
        self.train_observed(w0, config, &mut |_| {})
    }

    /// [`train`](Self::train), reporting every iteration to `observe` as it
    /// completes (so diagnostics survive a training failure).
    pub fn train_observed(
        &self,
        w0: &ProposalWeights,
        config: &TrainConfig,
        observe: &mut dyn FnMut(&IterStats),
    ) -> Result<TrainOutcome> {
        config.validate()?;
        let lambda = w0.lambda();
        let mut eta = config.eta.unwrap_or(0.1 * lambda);
        let mut current = w0.clone();
        let mut log: Vec<IterStats> = Vec::new();
        let mut best = (w0.clone(), 0usize, f64::NEG_INFINITY);
        let mut rising = 0usize;
        let mut decays = 0usize;
        let mut stop = StopReason::MaxIterations;
        for iteration in 0..config.max_iters {
            let seed = derive_seed(config.seed, &[iteration as u64]);
            let (next, mut stats, _) =
                self.iterate(&current, config.samples, eta, config.clip_norm, seed)?;
            stats.iteration = iteration;
            observe(&stats);
            if !stats.grad_norm.is_finite() || !next.omega.iter().all(|v| v.is_finite()) {
                return Err(Error::TrainingFailure {
                    iteration,
                    reason: format!("non-finite gradient (EffSS {:.3})", stats.effss),
                });
            }
            if stats.effss_fraction < config.effss_floor {
                warn!(
                    "iteration {iteration}: EffSS {:.1} is below {:.1}% of M",
                    stats.effss,
                    100.0 * config.effss_floor
                );
            }
            debug!(
                "iteration {iteration}: EffSS {:.1}, J {:.4}, |g| {:.4}",
                stats.effss, stats.cost_to_go, stats.grad_norm
            );
            if stats.effss > best.2 {
                best = (current.clone(), iteration, stats.effss);
            }
            match log.last() {
                Some(prev) if stats.grad_norm > prev.grad_norm => rising += 1,
                _ => rising = 0,
            }
            log.push(stats);
            if stats.grad_norm < config.grad_tol {
                stop = StopReason::GradientTolerance;
                break;
            }
            if rising >= config.divergence_window {
                decays += 1;
                rising = 0;
                if decays > config.max_decays {
                    return Err(Error::TrainingFailure {
                        iteration,
                        reason: format!(
                            "gradient norm kept growing after {} learning-rate decays (|g| = {:.4}, EffSS {:.1})",
                            config.max_decays, stats.grad_norm, stats.effss
                        ),
                    });
                }
                eta *= 0.5;
                warn!("iteration {iteration}: gradient norm rising, learning rate halved to {eta}");
            }
            current = next;
            if plateaued(&log, config.plateau_window, config.plateau_tol) {
                stop = StopReason::EffssPlateau;
                break;
            }
        }
        Ok(TrainOutcome {
            best: best.0,
            best_iteration: best.1,
            last: current,
            log,
            stop,
        })
    }
}

fn plateaued(log: &[IterStats], window: usize, tol: f64) -> bool {
    if window < 2 || log.len() < window {
        return false;
    }
    let recent = &log[log.len() - window..];
    let max = recent.iter().map(|s| s.effss).fold(f64::NEG_INFINITY, f64::max);
    let min = recent.iter().map(|s| s.effss).fold(f64::INFINITY, f64::min);
    (max - min) <= tol * max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_solver::DEFAULT_LAYER_CAP;
    use crate::growth_models::{HIndexCost, ThreadModel, ThreadModelParams, ToyModel};
    use crate::path_sampler::{enumerate_batch, Uncontrolled};
    use crate::rng::substream;
    use rand::RngExt;

    fn pv(e: &[Label]) -> ParentVector {
        ParentVector::from_entries(e.to_vec()).unwrap()
    }

    fn thread_model() -> ThreadModel {
        ThreadModel::new(ThreadModelParams::new(1.0, 0.8, 0.5)).unwrap()
    }

    #[test]
    fn zero_weights_give_uncontrolled_transitions() {
        let model = thread_model();
        let features = DegreeHistogramFeatures::default();
        let w = ProposalWeights::zeros(0, 50, features.dim(), 0.2, features.name());
        for seed in 0..20 {
            let x = crate::growth_models::generate_thread(&model, 1 + seed, &mut substream(seed as u64, &[]))
                .unwrap();
            let q = proposal_transition(&w, &model, &features, &x, x.len()).unwrap();
            let p = crate::growth_models::transition_probs(&model, &x, x.len()).unwrap();
            for (a, b) in q.iter().zip(&p) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_evaluated_thread_proposal() {
        let model = thread_model();
        let features = DegreeHistogramFeatures { k_max: 4 };
        let lambda = 0.5;
        let mut w = ProposalWeights::zeros(0, 10, features.dim(), lambda, features.name());
        let row = [0.3, -0.7, 0.2, 1.1, -0.4];
        for (k, &v) in row.iter().enumerate() {
            w.set(k, 3, v);
        }
        // root→{2,3}, 2→{4}: degrees (2, 2, 1, 1)
        let x = pv(&[1, 1, 2]);
        let q = proposal_transition(&w, &model, &features, &x, 3).unwrap();
        let p = crate::growth_models::transition_probs(&model, &x, 3).unwrap();
        let delta_cost = |d: usize| {
            // new leaf in bin 1, parent moves from bin d to bin d + 1
            row[0] + if d >= 1 { -row[d - 1] } else { 0.0 } + row[d.min(4)]
        };
        let degrees = [2, 2, 1, 1];
        let unnorm: Vec<f64> = (0..4)
            .map(|i| p[i].1 * (-delta_cost(degrees[i]) / lambda).exp())
            .collect();
        let z: f64 = unnorm.iter().sum();
        for i in 0..4 {
            assert!((q[i].1 - unnorm[i] / z).abs() < 1e-12);
        }
        assert!((q.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fast_and_generic_paths_agree() {
        let model = thread_model();
        let features = DegreeHistogramFeatures { k_max: 3 };
        let mut w = ProposalWeights::zeros(0, 30, features.dim(), 0.3, features.name());
        let mut rng = substream(9, &[]);
        for v in w.omega.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let policy = ProposalPolicy::new(&model, &features, &w).unwrap();
        assert!(policy.degree_factors.is_some());
        for seed in 0..10u64 {
            let x = crate::growth_models::generate_thread(&model, 5 + 2 * seed as usize, &mut substream(seed, &[1]))
                .unwrap();
            let tree = GrowingTree::from_parent_vector(&x);
            let (mut a, mut b) = (StepBuffer::default(), StepBuffer::default());
            policy.step(&tree, x.len(), &mut a).unwrap();
            model.transition(&tree, x.len(), &mut b.labels, &mut b.p).unwrap();
            policy.generic_q(&tree, x.len(), &mut b).unwrap();
            for (qa, qb) in a.q.iter().zip(&b.q) {
                assert!((qa - qb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toy_proposal_with_histogram_features_handles_no_addition() {
        let model = ToyModel::default();
        let features = DegreeHistogramFeatures { k_max: 4 };
        let mut w = ProposalWeights::zeros(1, 10, features.dim(), 0.4, features.name());
        w.set(0, 2, 0.9);
        w.set(2, 2, -0.5);
        let x = pv(&[1, 1]);
        let policy = ProposalPolicy::new(&model, &features, &w).unwrap();
        let tree = GrowingTree::from_parent_vector(&x);
        let (mut a, mut b) = (StepBuffer::default(), StepBuffer::default());
        policy.step(&tree, 2, &mut a).unwrap();
        model.transition(&tree, 2, &mut b.labels, &mut b.p).unwrap();
        policy.generic_q(&tree, 2, &mut b).unwrap();
        for (qa, qb) in a.q.iter().zip(&b.q) {
            assert!((qa - qb).abs() < 1e-12, "{:?} vs {:?}", a.q, b.q);
        }
    }

    #[test]
    fn raising_a_weight_lowers_its_successor() {
        let model = ToyModel::with_horizon(4);
        let lattice =
            StateLattice::build(&model, &model, &model.initial_state(), 1, 4, DEFAULT_LAYER_CAP)
                .unwrap();
        let features = TabularFeatures::new(lattice);
        let x = model.initial_state();
        let mut last = 1.0;
        for c in [0.0, 0.5, 1.0, 2.0] {
            let mut w = ProposalWeights::zeros(1, 4, features.dim(), 0.5, features.name());
            w.set(0, 1, c); // first child of the start state: "no addition"
            let q = proposal_transition(&w, &model, &features, &x, 1).unwrap();
            assert!(q[0].1 < last || c == 0.0);
            last = q[0].1;
        }
    }

    #[test]
    fn histogram_delta_touches_at_most_adjacent_bins_and_leaf() {
        let model = thread_model();
        let features = DegreeHistogramFeatures { k_max: 20 };
        let x = crate::growth_models::generate_thread(&model, 40, &mut substream(2, &[])).unwrap();
        let tree = GrowingTree::from_parent_vector(&x);
        let labels: Vec<Label> = (1..=tree.node_count() as Label).collect();
        let mut deltas = vec![vec![0.0; features.dim()]; labels.len()];
        features
            .visit_deltas(&tree, 40, &labels, &mut |c, k, v| deltas[c][k] += v)
            .unwrap();
        let before = x.degree_histogram(20);
        for (c, &l) in labels.iter().enumerate() {
            let after = x.extend(l).unwrap().degree_histogram(20);
            let mut diff = vec![0.0; features.dim()];
            for k in 1..=20 {
                diff[k - 1] = after.get(k) as f64 - before.get(k) as f64;
            }
            diff[20] = after.overflow() as f64 - before.overflow() as f64;
            assert_eq!(diff, deltas[c]);
            let nonzero: Vec<usize> = (0..diff.len()).filter(|&k| diff[k] != 0.0).collect();
            assert!(nonzero.len() <= 3);
        }
    }

    fn toy_setup(horizon: usize) -> (ToyModel, TabularFeatures) {
        let model = ToyModel::with_horizon(horizon);
        let lattice = StateLattice::build(
            &model,
            &model,
            &model.initial_state(),
            1,
            horizon,
            DEFAULT_LAYER_CAP,
        )
        .unwrap();
        (model, TabularFeatures::new(lattice))
    }

    /// Weights reproducing the exact optimal control: ω_k(t) = J(state k, t+1).
    fn optimal_weights(features: &TabularFeatures, lambda: f64) -> ProposalWeights {
        let lattice = features.lattice();
        let dp = lattice.solve(lambda).unwrap();
        let mut w = ProposalWeights::zeros(
            lattice.t0(),
            lattice.horizon(),
            features.dim(),
            lambda,
            features.name(),
        );
        for t in lattice.t0()..lattice.horizon() {
            for (k, &v) in dp.layer_values(t + 1).iter().enumerate() {
                w.set(k, t, v);
            }
        }
        w
    }

    #[test]
    fn enumerated_gradient_matches_finite_differences() {
        let (model, features) = toy_setup(4);
        let lambda = 0.5;
        let start = model.initial_state();
        let target = enumerate_batch(&Uncontrolled::new(&model), &model, &start, 1, 4, lambda, 1 << 20)
            .unwrap();
        let mut rng = substream(17, &[]);
        let mut w = ProposalWeights::zeros(1, 4, features.dim(), lambda, features.name());
        for t in 1..4 {
            for k in 0..features.lattice().layer_size(t + 1) {
                w.set(k, t, rng.random_range(-0.5..0.5));
            }
        }
        let policy = ProposalPolicy::new(&model, &features, &w).unwrap();
        let grad = ce_gradient_all(&policy, &target).unwrap();
        let ce = |w: &ProposalWeights| {
            cross_entropy(&ProposalPolicy::new(&model, &features, w).unwrap(), &target).unwrap()
        };
        for t in 1..4 {
            for k in 0..features.lattice().layer_size(t + 1) {
                let h = 1e-5;
                let (mut up, mut dn) = (w.clone(), w.clone());
                up.set(k, t, w.get(k, t) + h);
                dn.set(k, t, w.get(k, t) - h);
                let fd = (ce(&up) - ce(&dn)) / (2.0 * h);
                let g = grad[(t - 1) * features.dim() + k];
                assert!((g - fd).abs() <= 1e-7 * fd.abs().max(1e-3), "k={k} t={t}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_the_optimal_proposal() {
        let (model, features) = toy_setup(4);
        let lambda = 0.3;
        let w = optimal_weights(&features, lambda);
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 4,
        };
        let batch = problem.sample(&w, 20_000, 4).unwrap();
        // the optimal proposal makes every combined weight equal
        assert!((effective_sample_size(&batch).unwrap() - 20_000.0).abs() < 1e-6);
        let policy = ProposalPolicy::new(&model, &features, &w).unwrap();
        let g = ce_gradient_all(&policy, &batch).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 5.0 / lambda / (20_000f64).sqrt(), "norm {norm}");
        let exact = enumerate_batch(&Uncontrolled::new(&model), &model, &problem.start, 1, 4, lambda, 1 << 20)
            .unwrap();
        let g = ce_gradient_all(&policy, &exact).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn high_temperature_gradient_vanishes() {
        let (model, features) = toy_setup(5);
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 5,
        };
        let w = problem.zero_weights(1e6);
        let (_, stats, _) = problem.iterate(&w, 5_000, 0.0, 1e9, 1).unwrap();
        assert!(stats.grad_norm < 1e-5);
    }

    #[test]
    fn zero_learning_rate_and_zero_iterations_keep_weights() {
        let (model, features) = toy_setup(4);
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 4,
        };
        let w = problem.zero_weights(0.3);
        let (next, _, _) = problem.iterate(&w, 200, 0.0, 10.0, 0).unwrap();
        assert_eq!(next, w);
        let config = TrainConfig {
            max_iters: 0,
            samples: 10,
            ..TrainConfig::default()
        };
        let out = problem.train(&w, &config).unwrap();
        assert_eq!(out.best, w);
        assert!(out.log.is_empty());
    }

    #[test]
    fn descent_raises_effss_on_toy() {
        let (model, features) = toy_setup(6);
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 6,
        };
        let lambda = 0.2;
        let w0 = problem.zero_weights(lambda);
        let first = effective_sample_size(&problem.sample(&w0, 5_000, 1).unwrap()).unwrap();
        let mut w = w0;
        for i in 0..15 {
            w = problem.iterate(&w, 5_000, 1.0, 1e9, 100 + i).unwrap().0;
        }
        let after = effective_sample_size(&problem.sample(&w, 5_000, 1).unwrap()).unwrap();
        assert!(after > first, "{first} -> {after}");
    }

    #[test]
    fn trained_tabular_proposal_matches_optimal_control() {
        let (model, features) = toy_setup(5);
        let lambda = 0.5;
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 5,
        };
        let config = TrainConfig {
            samples: 10_000,
            eta: Some(0.5),
            max_iters: 600,
            plateau_window: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = problem.train(&problem.zero_weights(lambda), &config).unwrap();
        let dp = features.lattice().solve(lambda).unwrap();
        let policy = ProposalPolicy::new(&model, &features, &out.best).unwrap();
        // compare on states the optimal law visits with mass ≥ 0.01
        let exact = enumerate_batch(
            &crate::path_sampler::ExactOptimalPolicy { dp: &dp },
            &model,
            &problem.start,
            1,
            5,
            lambda,
            1 << 20,
        )
        .unwrap();
        let w = normalized_weights(&exact).unwrap();
        let mut worst: f64 = 0.0;
        let mut buf = StepBuffer::default();
        let mut visited = std::collections::HashMap::new();
        for i in 0..exact.len() {
            let mut tree = GrowingTree::from_parent_vector(&problem.start);
            for t in 1..5 {
                *visited.entry(tree.entries().to_vec()).or_insert(0.0) += w[i];
                tree.push(exact.action(i, t));
            }
        }
        for (entries, mass) in &visited {
            let x = ParentVector::from_entries(entries.clone()).unwrap();
            let tree = GrowingTree::from_parent_vector(&x);
            policy.step(&tree, x.len(), &mut buf).unwrap();
            let opt = dp.optimal_transition(&x).unwrap();
            let tv: f64 = opt.iter().zip(&buf.q).map(|(a, q)| (a.1 - q).abs()).sum::<f64>() / 2.0;
            if *mass >= 0.01 {
                worst = worst.max(tv);
            }
        }
        assert!(worst < 0.05, "worst TV {worst}");
    }

    #[test]
    fn thread_training_raises_effss() {
        let model = thread_model();
        let features = DegreeHistogramFeatures::default();
        let cost = HIndexCost { horizon: 50 };
        let problem = CeProblem {
            model: &model,
            cost: &cost,
            features: &features,
            start: ParentVector::new(),
            t0: 0,
            horizon: 50,
        };
        let config = TrainConfig {
            samples: 2_000,
            max_iters: 20,
            plateau_window: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = problem.train(&problem.zero_weights(0.5), &config).unwrap();
        let median = |s: &[IterStats]| {
            let mut v: Vec<f64> = s.iter().map(|x| x.effss).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let n = out.log.len();
        assert!(median(&out.log[n - 5..]) > median(&out.log[..5]));
        assert!(out.log.iter().all(|s| s.effss_fraction < 1.0));
    }

    #[test]
    fn training_is_reproducible() {
        let (model, features) = toy_setup(5);
        let problem = CeProblem {
            model: &model,
            cost: &model,
            features: &features,
            start: model.initial_state(),
            t0: 1,
            horizon: 5,
        };
        let config = TrainConfig {
            samples: 500,
            max_iters: 5,
            seed: 8,
            ..TrainConfig::default()
        };
        let a = problem.train(&problem.zero_weights(0.3), &config).unwrap();
        let b = problem.train(&problem.zero_weights(0.3), &config).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.log, b.log);
    }
}

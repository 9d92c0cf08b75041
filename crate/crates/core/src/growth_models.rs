//! Uncontrolled growth dynamics p(x'|x) and the state costs that define tasks.
//!
//! Two processes are provided: the root-biased toy process with its
//! Wiener-index end cost, and the popularity / novelty / root-bias model of
//! discussion threads with an h-index end cost. The thread model can be fitted
//! to a corpus of parent vectors by maximum likelihood.

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tree_state::{chain_wiener, GrowingTree, Label, ParentVector, NO_NODE, ROOT};

/// Uncontrolled transition kernel over parent labels.
pub trait GrowthModel: Send + Sync {
    /// Writes the candidate labels (ascending) and their unnormalized weights
    /// for the transition out of `tree` at time `t`; returns the weight total.
    fn weights(
        &self,
        tree: &GrowingTree,
        t: usize,
        labels: &mut Vec<Label>,
        weights: &mut Vec<f64>,
    ) -> Result<f64>;

    /// Fast path for models whose candidates are exactly the labels
    /// `1..=node_count`: fills `cum` with the cumulative tilted weights
    /// `Σ w_j·tilt[deg(j)]` (zero past the end of `tilt`) and returns the
    /// untilted and tilted totals. `None` when the model has no such path.
    fn degree_tilted(
        &self,
        _tree: &GrowingTree,
        _t: usize,
        _tilt: &[f64],
        _cum: &mut Vec<f64>,
    ) -> Option<(f64, f64)> {
        None
    }

    /// Normalized transition distribution.
    fn transition(
        &self,
        tree: &GrowingTree,
        t: usize,
        labels: &mut Vec<Label>,
        probs: &mut Vec<f64>,
    ) -> Result<()> {
        let total = self.weights(tree, t, labels, probs)?;
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateModel { t });
        }
        let inv = total.recip();
        probs.iter_mut().for_each(|p| *p *= inv);
        Ok(())
    }
}

/// State cost r(x, t).
pub trait StateCost: Send + Sync {
    fn cost(&self, tree: &GrowingTree, t: usize) -> f64;

    /// True when r(x, t) is zero for every x at this time, letting samplers
    /// skip evaluation.
    fn is_zero_at(&self, _t: usize) -> bool {
        false
    }
}

/// Draws the next label from the model's transition distribution.
pub fn sample_next<M: GrowthModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    tree: &GrowingTree,
    t: usize,
    rng: &mut R,
) -> Result<Label> {
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let total = model.weights(tree, t, &mut labels, &mut weights)?;
    if !(total > 0.0) {
        return Err(Error::DegenerateModel { t });
    }
    Ok(labels[pick(&weights, total, rng)])
}

/// Inverse-CDF draw from unnormalized weights.
#[inline]
pub(crate) fn pick<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    pick_at(weights, total, rng.random::<f64>())
}

/// Inverse-CDF lookup of the uniform `u` in unnormalized weights.
#[inline]
pub(crate) fn pick_at(weights: &[f64], total: f64, u: f64) -> usize {
    let mut u = u * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u just above the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Convenience wrapper returning `(label, probability)` pairs for a parent vector.
pub fn transition_probs<M: GrowthModel + ?Sized>(
    model: &M,
    x: &ParentVector,
    t: usize,
) -> Result<Vec<(Label, f64)>> {
    let tree = GrowingTree::from_parent_vector(x);
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    model.transition(&tree, t, &mut labels, &mut probs)?;
    Ok(labels.into_iter().zip(probs).collect())
}

/// Root-biased toy process with a Wiener-index end cost.
///
/// A new node links the root with probability `root_prob`; the rest of the
/// mass is split evenly over "no addition" and the non-root labels
/// `2..=‖x‖₀`, where ‖x‖₀ is the number of nodes added so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub root_prob: f64,
    pub horizon: usize,
    pub size_threshold: usize,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            root_prob: 0.6,
            horizon: 10,
            size_threshold: 5,
        }
    }
}

impl ToyModel {
    pub fn with_horizon(horizon: usize) -> Self {
        ToyModel {
            horizon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.root_prob > 0.0 && self.root_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "root_prob must lie in (0, 1), got {}",
                self.root_prob
            )));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Start state of toy rollouts: the root with one child, at t = 1.
    pub fn initial_state(&self) -> ParentVector {
        ParentVector::from_entries(vec![ROOT]).expect("valid")
    }
}

impl GrowthModel for ToyModel {
    fn weights(
        &self,
        tree: &GrowingTree,
        _t: usize,
        labels: &mut Vec<Label>,
        weights: &mut Vec<f64>,
    ) -> Result<f64> {
        labels.clear();
        weights.clear();
        let added = tree.node_count() - 1;
        if added == 0 {
            // the first step always attaches to the root
            labels.push(ROOT);
            weights.push(1.0);
            return Ok(1.0);
        }
        let share = (1.0 - self.root_prob) / added as f64;
        labels.push(NO_NODE);
        weights.push(share);
        labels.push(ROOT);
        weights.push(self.root_prob);
        for label in 2..=added as Label {
            labels.push(label);
            weights.push(share);
        }
        Ok(1.0)
    }
}

impl StateCost for ToyModel {
    fn cost(&self, tree: &GrowingTree, t: usize) -> f64 {
        if t != self.horizon {
            return 0.0;
        }
        if tree.node_count() - 1 < self.size_threshold {
            // scaled by the largest tree that escapes the size penalty, so
            // the chain of `size_threshold` nodes is the unique minimizer
            -(tree.wiener_index() as f64) / chain_wiener(self.size_threshold) as f64
        } else {
            1.0
        }
    }

    fn is_zero_at(&self, t: usize) -> bool {
        t != self.horizon
    }
}

/// Toy end cost evaluated on a parent vector.
pub fn toy_state_cost(model: &ToyModel, x: &ParentVector, t: usize) -> f64 {
    model.cost(&GrowingTree::from_parent_vector(x), t)
}

/// θ = (popularity α, novelty τ, root bias β) of the thread model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadModelParams {
    pub popularity_alpha: f64,
    pub novelty_tau: f64,
    pub root_beta: f64,
}

impl ThreadModelParams {
    pub fn new(popularity_alpha: f64, novelty_tau: f64, root_beta: f64) -> Self {
        ThreadModelParams {
            popularity_alpha,
            novelty_tau,
            root_beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.popularity_alpha >= 0.0
            && self.root_beta >= 0.0
            && self.novelty_tau > 0.0
            && self.novelty_tau <= 1.0
            && self.popularity_alpha.is_finite()
            && self.root_beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "thread parameters need alpha >= 0, beta >= 0, 0 < tau <= 1; got {self:?}"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.popularity_alpha, self.novelty_tau, self.root_beta]
    }
}

impl Default for ThreadModelParams {
    /// Uncontrolled threads of 50 replies reach a mean final h-index of
    /// about 3.7 under these values.
    fn default() -> Self {
        ThreadModelParams::new(1.0, 0.8, 0.5)
    }
}

const TAU_TABLE_LEN: usize = 1024;

/// Thread model with a precomputed novelty power table.
///
/// Node `j` attracts the next reply with weight
/// `deg(j)·α + [j = root]·β + τ^((t+1) − arrival(j))`.
#[derive(Clone, Debug)]
pub struct ThreadModel {
    params: ThreadModelParams,
    tau_pow: Vec<f64>,
}

impl ThreadModel {
    pub fn new(params: ThreadModelParams) -> Result<Self> {
        params.validate()?;
        let mut tau_pow = Vec::with_capacity(TAU_TABLE_LEN);
        let mut p = 1.0;
        for _ in 0..TAU_TABLE_LEN {
            tau_pow.push(p);
            p *= params.novelty_tau;
        }
        Ok(ThreadModel { params, tau_pow })
    }

    pub fn params(&self) -> &ThreadModelParams {
        &self.params
    }

    #[inline]
    fn tau_pow(&self, e: usize) -> f64 {
        match self.tau_pow.get(e) {
            Some(&v) => v,
            None => self.params.novelty_tau.powi(e as i32),
        }
    }

    /// Unnormalized weight of attaching to `label`.
    #[inline]
    pub fn node_weight(&self, tree: &GrowingTree, t: usize, label: Label) -> f64 {
        let age = (t + 1).saturating_sub(tree.arrival(label) as usize);
        let mut w = tree.degree(label) as f64 * self.params.popularity_alpha + self.tau_pow(age);
        if label == ROOT {
            w += self.params.root_beta;
        }
        w
    }
}

impl GrowthModel for ThreadModel {
    fn weights(
        &self,
        tree: &GrowingTree,
        t: usize,
        labels: &mut Vec<Label>,
        weights: &mut Vec<f64>,
    ) -> Result<f64> {
        let n = tree.node_count();
        labels.resize(n, 0);
        for (i, l) in labels.iter_mut().enumerate() {
            *l = i as Label + 1;
        }
        weights.resize(n, 0.0);
        let alpha = self.params.popularity_alpha;
        let now = t + 1;
        // every node is written as non-root (degree = replies + 1); the root
        // is corrected afterwards
        let mut total = 0.0;
        let nodes = weights.iter_mut().zip(tree.children_counts()).zip(tree.arrivals());
        if now < self.tau_pow.len() {
            let table = &self.tau_pow[..=now];
            for ((w, &c), &a) in nodes {
                *w = (c + 1) as f64 * alpha + table[now - a as usize];
                total += *w;
            }
        } else {
            for ((w, &c), &a) in nodes {
                *w = (c + 1) as f64 * alpha + self.tau_pow(now - a as usize);
                total += *w;
            }
        }
        let root_shift = self.params.root_beta - alpha;
        weights[0] += root_shift;
        total += root_shift;
        if !(total > 0.0) {
            return Err(Error::DegenerateModel { t });
        }
        Ok(total)
    }

    fn degree_tilted(
        &self,
        tree: &GrowingTree,
        t: usize,
        tilt: &[f64],
        cum: &mut Vec<f64>,
    ) -> Option<(f64, f64)> {
        cum.resize(tree.node_count(), 0.0);
        let now = t + 1;
        Some(if now < self.tau_pow.len() {
            let table = &self.tau_pow[..=now];
            self.tilted_loop(tree, now, tilt, cum, |age| table[age])
        } else {
            self.tilted_loop(tree, now, tilt, cum, |age| self.tau_pow(age))
        })
    }
}

impl ThreadModel {
    fn tilted_loop(
        &self,
        tree: &GrowingTree,
        now: usize,
        tilt: &[f64],
        cum: &mut [f64],
        novelty: impl Fn(usize) -> f64,
    ) -> (f64, f64) {
        let alpha = self.params.popularity_alpha;
        let children = tree.children_counts();
        let arrivals = tree.arrivals();
        let tilt_at = |d: u32| tilt.get(d as usize).copied().unwrap_or(0.0);
        let w = children[0] as f64 * alpha + self.params.root_beta + novelty(now);
        let (mut z_p, mut z_q) = (w, w * tilt_at(children[0]));
        cum[0] = z_q;
        for ((c, &k), &a) in cum[1..].iter_mut().zip(&children[1..]).zip(&arrivals[1..]) {
            let w = (k + 1) as f64 * alpha + novelty(now - a as usize);
            z_p += w;
            z_q += w * tilt_at(k + 1);
            *c = z_q;
        }
        (z_p, z_q)
    }
}

/// End cost −h(x) at the horizon, zero before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HIndexCost {
    pub horizon: usize,
}

impl StateCost for HIndexCost {
    fn cost(&self, tree: &GrowingTree, t: usize) -> f64 {
        if t == self.horizon {
            -(tree.h_index() as f64)
        } else {
            0.0
        }
    }

    fn is_zero_at(&self, t: usize) -> bool {
        t != self.horizon
    }
}

/// Grows one thread of `length` replies from the root.
pub fn generate_thread<M: GrowthModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    length: usize,
    rng: &mut R,
) -> Result<ParentVector> {
    let mut tree = GrowingTree::new();
    let (mut labels, mut weights) = (Vec::new(), Vec::new());
    for t in 0..length {
        let total = model.weights(&tree, t, &mut labels, &mut weights)?;
        tree.push(labels[pick(&weights, total, rng)]);
    }
    Ok(tree.to_parent_vector())
}

/// Synthetic corpus; thread `i` uses the stream keyed by `(seed, i)`.
pub fn generate_corpus<M: GrowthModel>(
    model: &M,
    threads: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<ParentVector>> {
    (0..threads)
        .into_par_iter()
        .map(|i| generate_thread(model, length, &mut substream(seed, &[i as u64])))
        .collect()
}

fn check_corpus(corpus: &[ParentVector]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Ingestion("corpus is empty".into()));
    }
    for (i, x) in corpus.iter().enumerate() {
        if x.node_count() < 2 {
            return Err(Error::Ingestion(format!("thread {} has fewer than 2 nodes", i + 1)));
        }
        if x.entries().contains(&NO_NODE) {
            return Err(Error::Ingestion(format!(
                "thread {} contains a no-addition entry; every thread step adds a reply",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood and its gradient with respect to (α, τ, β).
///
/// The normalizer is evaluated in closed form: the degree sum of an
/// n-node tree is 2(n − 1), and the novelty terms form a geometric series
/// because every step adds exactly one node.
pub fn neg_log_likelihood_with_grad(
    params: &ThreadModelParams,
    corpus: &[ParentVector],
) -> Result<(f64, [f64; 3])> {
    params.validate()?;
    check_corpus(corpus)?;
    let (alpha, tau, beta) = (params.popularity_alpha, params.novelty_tau, params.root_beta);
    let mut nll = 0.0;
    let mut grad = [0.0; 3];
    let mut children: Vec<u32> = Vec::new();
    let mut tau_pows: Vec<f64> = Vec::new();
    for x in corpus {
        let len = x.len();
        children.clear();
        children.resize(len + 1, 0);
        tau_pows.clear();
        let mut p = 1.0;
        for _ in 0..=len + 1 {
            tau_pows.push(p);
            p *= tau;
        }
        // novelty sum S = Σ_{m=1}^{s+1} τ^m and dS/dτ
        let mut novelty = 0.0;
        let mut novelty_d = 0.0;
        for (s, &parent) in x.entries().iter().enumerate() {
            let m = s + 1;
            novelty += tau_pows[m];
            novelty_d += m as f64 * tau_pows[m - 1];
            let j = parent as usize;
            if s > 0 {
                let deg = children[j - 1] as f64 + f64::from(j != 1);
                // arrival(j) = j - 1 for threads, so the exponent is s + 2 - j
                let e = s + 2 - j;
                let is_root = f64::from(j == 1);
                let w = deg * alpha + is_root * beta + tau_pows[e];
                let z = 2.0 * s as f64 * alpha + beta + novelty;
                nll -= w.ln() - z.ln();
                grad[0] -= deg / w - 2.0 * s as f64 / z;
                grad[1] -= e as f64 * tau_pows[e - 1] / w - novelty_d / z;
                grad[2] -= is_root / w - 1.0 / z;
            }
            children[j - 1] += 1;
        }
    }
    if !nll.is_finite() {
        return Err(Error::Ingestion(format!(
            "likelihood is not finite under {params:?}"
        )));
    }
    Ok((nll, grad))
}

pub fn neg_log_likelihood(params: &ThreadModelParams, corpus: &[ParentVector]) -> Result<f64> {
    neg_log_likelihood_with_grad(params, corpus).map(|(v, _)| v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: ThreadModelParams,
    pub nll: f64,
    /// Gradient norm in the unconstrained (log / logit) coordinates.
    pub grad_norm: f64,
    pub iterations: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iters: u64,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 500,
            grad_tol: 1e-6,
        }
    }
}

/// Mean NLL per observed reply, so gradients stay O(1) for any corpus size.
struct NllProblem<'a> {
    corpus: &'a [ParentVector],
    scale: f64,
}

fn from_unconstrained(z: &[f64]) -> ThreadModelParams {
    ThreadModelParams {
        popularity_alpha: z[0].exp(),
        novelty_tau: 1.0 / (1.0 + (-z[1]).exp()),
        root_beta: z[2].exp(),
    }
}

fn to_unconstrained(p: &ThreadModelParams) -> Vec<f64> {
    let tiny = 1e-12;
    let tau = p.novelty_tau.clamp(tiny, 1.0 - 1e-9);
    vec![
        p.popularity_alpha.max(tiny).ln(),
        (tau / (1.0 - tau)).ln(),
        p.root_beta.max(tiny).ln(),
    ]
}

impl NllProblem<'_> {
    fn eval(&self, z: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        let p = from_unconstrained(z);
        let (v, g) = neg_log_likelihood_with_grad(&p, self.corpus)
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        let tau = p.novelty_tau;
        Ok((
            v * self.scale,
            vec![
                g[0] * p.popularity_alpha * self.scale,
                g[1] * tau * (1.0 - tau) * self.scale,
                g[2] * p.root_beta * self.scale,
            ],
        ))
    }
}

impl CostFunction for NllProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, z: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        self.eval(z).map(|(v, _)| v)
    }
}

impl Gradient for NllProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, z: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.eval(z).map(|(_, g)| g)
    }
}

/// Maximum-likelihood fit of the thread model by L-BFGS in log / logit
/// coordinates, which keep α, β positive and τ inside (0, 1).
pub fn fit(
    corpus: &[ParentVector],
    init: &ThreadModelParams,
    options: &FitOptions,
) -> Result<FitReport> {
    init.validate()?;
    check_corpus(corpus)?;
    let replies: usize = corpus.iter().map(|x| x.len()).sum();
    let scale = 1.0 / replies as f64;
    let problem = NllProblem { corpus, scale };
    let z0 = to_unconstrained(init);
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
        .with_tolerance_grad(options.grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let result = Executor::new(problem, solver)
        .configure(|state| state.param(z0).max_iters(options.max_iters))
        .run();
    let state = match result {
        Ok(res) => res.state,
        Err(e) => {
            return Err(Error::FitFailure {
                iterations: 0,
                nll: f64::NAN,
                grad_norm: f64::NAN,
                reason: e.to_string(),
            })
        }
    };
    let iterations = state.get_iter();
    let best = state
        .get_best_param()
        .cloned()
        .unwrap_or_else(|| to_unconstrained(init));
    let params = from_unconstrained(&best);
    let eval = NllProblem { corpus, scale: 1.0 }.eval(&best).map_err(|e| Error::FitFailure {
        iterations,
        nll: f64::NAN,
        grad_norm: f64::NAN,
        reason: e.to_string(),
    })?;
    let grad_norm = eval.1.iter().map(|g| g * g).sum::<f64>().sqrt();
    // a failed line search can stop the solver early with a "converged" status
    let stalled = grad_norm * scale > options.grad_tol.max(1e-4);
    let converged = !stalled && match state.get_termination_status() {
        TerminationStatus::Terminated(reason) => !matches!(
            reason,
            TerminationReason::MaxItersReached | TerminationReason::Interrupt
        ),
        TerminationStatus::NotTerminated => false,
    };
    if !converged {
        return Err(Error::FitFailure {
            iterations,
            nll: eval.0,
            grad_norm,
            reason: format!("{:?}", state.get_termination_status()),
        });
    }
    Ok(FitReport {
        params,
        nll: eval.0,
        grad_norm,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn pv(entries: &[Label]) -> ParentVector {
        ParentVector::from_entries(entries.to_vec()).unwrap()
    }

    fn probs<M: GrowthModel>(model: &M, x: &ParentVector) -> Vec<(Label, f64)> {
        transition_probs(model, x, x.len()).unwrap()
    }

    #[test]
    fn toy_transition_examples() {
        let toy = ToyModel::default();
        let p = probs(&toy, &pv(&[1]));
        assert_eq!(p, vec![(0, 0.4), (1, 0.6)]);
        let p = probs(&toy, &pv(&[1, 1]));
        assert_eq!(p.len(), 3);
        assert!((p[0].1 - 0.2).abs() < 1e-15 && (p[2].1 - 0.2).abs() < 1e-15);
        assert_eq!(p[1], (1, 0.6));
    }

    #[test]
    fn toy_root_only_attaches_to_root() {
        assert_eq!(probs(&ToyModel::default(), &ParentVector::new()), vec![(1, 1.0)]);
    }

    #[test]
    fn toy_cost_examples() {
        let toy = ToyModel::default();
        let chain5 = pv(&[1, 2, 3, 4]);
        assert_eq!(toy_state_cost(&toy, &chain5, 10), -1.0);
        assert_eq!(toy_state_cost(&toy, &pv(&[1, 2, 3, 4, 1]), 10), 1.0);
        assert_eq!(toy_state_cost(&toy, &chain5, 9), 0.0);
        assert!((toy_state_cost(&toy, &pv(&[1, 1, 1, 1]), 10) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn thread_transition_example() {
        let model = ThreadModel::new(ThreadModelParams::new(1.0, 1.0, 0.0)).unwrap();
        let x = pv(&[1, 1, 2]);
        let p = probs(&model, &x);
        let expected = [0.3, 0.3, 0.2, 0.2];
        for ((label, prob), (i, e)) in p.iter().zip(expected.iter().enumerate()) {
            assert_eq!(*label, i as Label + 1);
            assert!((prob - e).abs() < 1e-15, "{p:?}");
        }
    }

    #[test]
    fn thread_uniform_and_root_limit() {
        let x = pv(&[1, 1, 2, 3, 3]);
        let uniform = ThreadModel::new(ThreadModelParams::new(0.0, 1.0, 0.0)).unwrap();
        for (_, p) in probs(&uniform, &x) {
            assert_eq!(p, 1.0 / 6.0);
        }
        let rooted = ThreadModel::new(ThreadModelParams::new(1.0, 0.5, 1e12)).unwrap();
        assert!(probs(&rooted, &x)[0].1 > 1.0 - 1e-10);
        let mut rng = substream(1, &[]);
        let tree = GrowingTree::from_parent_vector(&x);
        for _ in 0..100 {
            assert_eq!(sample_next(&rooted, &tree, x.len(), &mut rng).unwrap(), ROOT);
        }
    }

    #[test]
    fn invalid_thread_params_rejected() {
        assert!(ThreadModel::new(ThreadModelParams::new(1.0, 0.0, 0.0)).is_err());
        assert!(ThreadModel::new(ThreadModelParams::new(-1.0, 0.5, 0.0)).is_err());
        assert!(ThreadModel::new(ThreadModelParams::new(1.0, 1.5, 0.0)).is_err());
    }

    #[test]
    fn transitions_sum_to_one_on_random_states() {
        let toy = ToyModel::default();
        let thread = ThreadModel::new(ThreadModelParams::new(0.7, 0.9, 1.3)).unwrap();
        for seed in 0..50 {
            let mut rng = substream(seed, &[]);
            let x = generate_thread(&thread, 1 + seed as usize, &mut rng).unwrap();
            for p in [probs(&thread, &x), probs(&toy, &x)] {
                let total: f64 = p.iter().map(|(_, q)| q).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_next_frequency_and_determinism() {
        let toy = ToyModel::default();
        let tree = GrowingTree::from_parent_vector(&pv(&[1]));
        let mut rng = substream(42, &[]);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_next(&toy, &tree, 1, &mut rng).unwrap() == ROOT)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.6).abs() < 0.01, "freq = {freq}");

        let draw = |seed| {
            let mut rng = substream(seed, &[]);
            (0..20)
                .map(|_| sample_next(&toy, &tree, 1, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn empirical_frequencies_within_binomial_bounds() {
        let model = ThreadModel::new(ThreadModelParams::new(1.0, 0.8, 0.5)).unwrap();
        let x = pv(&[1, 1, 2, 2, 1, 4]);
        let tree = GrowingTree::from_parent_vector(&x);
        let p = probs(&model, &x);
        let n = 100_000usize;
        let mut counts = vec![0usize; p.len()];
        let mut rng = substream(3, &[]);
        for _ in 0..n {
            let l = sample_next(&model, &tree, x.len(), &mut rng).unwrap();
            counts[l as usize - 1] += 1;
        }
        for ((_, q), c) in p.iter().zip(counts) {
            let sigma = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((c as f64 - n as f64 * q).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn nll_forced_transition_is_zero() {
        let params = ThreadModelParams::new(1.0, 0.8, 0.5);
        assert_eq!(neg_log_likelihood(&params, &[pv(&[1])]).unwrap(), 0.0);
    }

    #[test]
    fn nll_matches_direct_evaluation_and_is_order_invariant() {
        let params = ThreadModelParams::new(0.8, 0.7, 1.2);
        let model = ThreadModel::new(params).unwrap();
        let corpus = generate_corpus(&model, 20, 15, 5).unwrap();
        let mut direct = 0.0;
        for x in &corpus {
            let mut tree = GrowingTree::new();
            for (t, &l) in x.entries().iter().enumerate() {
                let p = transition_probs(&model, &tree.to_parent_vector(), t).unwrap();
                direct -= p[l as usize - 1].1.ln();
                tree.push(l);
            }
        }
        let nll = neg_log_likelihood(&params, &corpus).unwrap();
        assert!((nll - direct).abs() < 1e-9 * direct.abs());
        let mut reversed = corpus.clone();
        reversed.reverse();
        let nll_rev = neg_log_likelihood(&params, &reversed).unwrap();
        assert!((nll - nll_rev).abs() < 1e-9 * nll.abs());
    }

    #[test]
    fn nll_gradient_matches_central_differences() {
        let truth = ThreadModelParams::new(1.0, 0.8, 0.5);
        let corpus = generate_corpus(&ThreadModel::new(truth).unwrap(), 40, 30, 11).unwrap();
        for probe in [
            ThreadModelParams::new(0.6, 0.5, 0.9),
            ThreadModelParams::new(1.4, 0.9, 0.2),
        ] {
            let (_, g) = neg_log_likelihood_with_grad(&probe, &corpus).unwrap();
            for k in 0..3 {
                let h = 1e-4;
                let mut up = probe.as_array();
                let mut dn = probe.as_array();
                up[k] += h;
                dn[k] -= h;
                let f = |a: [f64; 3]| {
                    neg_log_likelihood(&ThreadModelParams::new(a[0], a[1], a[2]), &corpus).unwrap()
                };
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "component {k}: analytic {} vs fd {fd}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn corpus_validation() {
        let params = ThreadModelParams::new(1.0, 0.8, 0.5);
        assert!(matches!(neg_log_likelihood(&params, &[]), Err(Error::Ingestion(_))));
        assert!(neg_log_likelihood(&params, &[ParentVector::new()]).is_err());
        assert!(neg_log_likelihood(&params, &[pv(&[1, 0, 2])]).is_err());
    }

    #[test]
    fn fit_from_truth_does_not_increase_nll() {
        let truth = ThreadModelParams::new(1.0, 0.8, 0.5);
        let corpus = generate_corpus(&ThreadModel::new(truth).unwrap(), 300, 30, 21).unwrap();
        let report = fit(&corpus, &truth, &FitOptions::default()).unwrap();
        assert!(report.nll <= neg_log_likelihood(&truth, &corpus).unwrap() + 1e-9);
    }

    #[test]
    fn fit_reaches_the_same_optimum_from_a_distant_start() {
        let truth = ThreadModelParams::new(1.0, 0.8, 0.5);
        let corpus = generate_corpus(&ThreadModel::new(truth).unwrap(), 2000, 50, 77).unwrap();
        let near = fit(&corpus, &truth, &FitOptions::default()).unwrap();
        let far = fit(&corpus, &ThreadModelParams::new(0.5, 0.5, 1.0), &FitOptions::default()).unwrap();
        for (a, b) in near.params.as_array().iter().zip(far.params.as_array()) {
            assert!((a - b).abs() < 1e-2 * a, "{near:?} vs {far:?}");
        }
    }

    #[test]
    fn star_corpus_fit_is_dominated_by_popularity() {
        let corpus = vec![pv(&[1; 30]); 50];
        let init = ThreadModelParams::new(1.0, 0.8, 0.5);
        let report = fit(&corpus, &init, &FitOptions::default()).unwrap();
        let p = report.params;
        assert!(p.popularity_alpha > 100.0 * p.novelty_tau, "{p:?}");
        assert!(report.nll < neg_log_likelihood(&init, &corpus).unwrap());
    }
}

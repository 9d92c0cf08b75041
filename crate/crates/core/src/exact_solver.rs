//! Exact KL-control by backward recursion over every reachable state.
//!
//! The reachable states of a finite-horizon problem form a tree of layers.
//! [`StateLattice`] enumerates it once (children of a state are stored
//! contiguously in the next layer together with their transition log-prob
//! and state cost); [`StateLattice::solve`] then runs
//! `J(x,t) = r(x,t) − λ log Σ p(x′|x) exp(−J(x′,t+1)/λ)` for any λ.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::growth_models::{GrowthModel, StateCost};
use crate::tree_state::{chain_wiener, GrowingTree, Label, ParentVector, NO_NODE, ROOT};

pub const DEFAULT_LAYER_CAP: usize = 1_000_000;

/// Relative tolerance under which two rollout scores count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
struct Layer {
    label: Vec<Label>,
    log_p: Vec<f64>,
    cost: Vec<f64>,
    /// `first_child[i]..first_child[i + 1]` indexes the next layer; empty for
    /// the final layer.
    first_child: Vec<u32>,
}

impl Layer {
    fn len(&self) -> usize {
        self.label.len()
    }
}

/// Position of a state in the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateRef {
    pub layer: usize,
    pub index: usize,
}

/// Every state reachable from a start state, layered by time.
#[derive(Debug)]
pub struct StateLattice {
    start: ParentVector,
    t0: usize,
    horizon: usize,
    layers: Vec<Layer>,
}

impl StateLattice {
    /// Enumerates reachable states up to `horizon`, failing when a layer
    /// would exceed `cap` states.
    pub fn build<M: GrowthModel + ?Sized, C: StateCost + ?Sized>(
        model: &M,
        cost: &C,
        start: &ParentVector,
        t0: usize,
        horizon: usize,
        cap: usize,
    ) -> Result<Arc<Self>> {
        if horizon < t0 {
            return Err(Error::InvalidParameter(format!(
                "horizon {horizon} precedes start time {t0}"
            )));
        }
        let mut tree = GrowingTree::from_parent_vector(start);
        let mut layers = vec![Layer::default(); horizon - t0 + 1];
        layers[0].label.push(start.entries().last().copied().unwrap_or(NO_NODE));
        layers[0].log_p.push(0.0);
        layers[0].cost.push(cost.cost(&tree, t0));
        let mut builder = Builder {
            model,
            cost,
            t0,
            horizon,
            cap,
            layers,
            scratch: vec![(Vec::new(), Vec::new()); horizon - t0 + 1],
        };
        builder.visit(&mut tree, t0)?;
        let mut layers = builder.layers;
        for li in 0..layers.len().saturating_sub(1) {
            let n = layers[li + 1].len() as u32;
            layers[li].first_child.push(n);
        }
        Ok(Arc::new(StateLattice {
            start: start.clone(),
            t0,
            horizon,
            layers,
        }))
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

    /// Number of states per time step, from t0 to the horizon.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::len).collect()
    }

    pub fn layer_size(&self, t: usize) -> usize {
        self.layers[t - self.t0].len()
    }

    pub fn children(&self, s: StateRef) -> Range<usize> {
        let fc = &self.layers[s.layer].first_child;
        fc[s.index] as usize..fc[s.index + 1] as usize
    }

    pub fn label(&self, s: StateRef) -> Label {
        self.layers[s.layer].label[s.index]
    }

    pub fn log_p(&self, s: StateRef) -> f64 {
        self.layers[s.layer].log_p[s.index]
    }

    pub fn cost(&self, s: StateRef) -> f64 {
        self.layers[s.layer].cost[s.index]
    }

    /// Finds the state reached from the start by the given parent-vector
    /// entries.
    pub fn locate(&self, entries: &[Label]) -> Result<StateRef> {
        let missing = || Error::MissingState {
            state: format_entries(entries),
            t: entries.len(),
        };
        let prefix = self.start.entries();
        if entries.len() < prefix.len()
            || entries.len() > self.horizon
            || entries[..prefix.len()] != *prefix
        {
            return Err(missing());
        }
        let mut s = StateRef { layer: 0, index: 0 };
        for &l in &entries[prefix.len()..] {
            let next = &self.layers[s.layer + 1].label;
            let index = self
                .children(s)
                .find(|&c| next[c] == l)
                .ok_or_else(missing)?;
            s = StateRef {
                layer: s.layer + 1,
                index,
            };
        }
        Ok(s)
    }

    /// Solves the recursion at temperature λ.
    pub fn solve(self: &Arc<Self>, lambda: f64) -> Result<DPTable> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {lambda}"
            )));
        }
        let n = self.layers.len();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
        values[n - 1] = self.layers[n - 1].cost.clone();
        for li in (0..n - 1).rev() {
            let layer = &self.layers[li];
            let next = &self.layers[li + 1];
            let next_values = &values[li + 1];
            let current: Vec<f64> = (0..layer.len())
                .into_par_iter()
                .map(|i| {
                    let range = layer.first_child[i] as usize..layer.first_child[i + 1] as usize;
                    let lse = log_sum_exp_iter(
                        range.map(|c| next.log_p[c] - next_values[c] / lambda),
                    );
                    layer.cost[i] - lambda * lse
                })
                .collect();
            values[li] = current;
        }
        Ok(DPTable {
            lattice: Arc::clone(self),
            lambda,
            values,
        })
    }
}

fn format_entries(entries: &[Label]) -> String {
    entries
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn log_sum_exp_iter<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Builder<'a, M: ?Sized, C: ?Sized> {
    model: &'a M,
    cost: &'a C,
    t0: usize,
    horizon: usize,
    cap: usize,
    layers: Vec<Layer>,
    scratch: Vec<(Vec<Label>, Vec<f64>)>,
}

impl<M: GrowthModel + ?Sized, C: StateCost + ?Sized> Builder<'_, M, C> {
    // Depth-first: children of each state are appended as one block, so the
    // next layer stays ordered by parent.
    fn visit(&mut self, tree: &mut GrowingTree, t: usize) -> Result<()> {
        let li = t - self.t0;
        if t == self.horizon {
            return Ok(());
        }
        let (mut labels, mut probs) = std::mem::take(&mut self.scratch[li]);
        self.model.transition(tree, t, &mut labels, &mut probs)?;
        let start = self.layers[li + 1].len();
        self.layers[li].first_child.push(start as u32);
        let zero_cost = self.cost.is_zero_at(t + 1);
        for (&l, &p) in labels.iter().zip(&probs) {
            if p <= 0.0 {
                continue;
            }
            let r = if zero_cost {
                0.0
            } else {
                tree.push(l);
                let r = self.cost.cost(tree, t + 1);
                tree.pop();
                r
            };
            let next = &mut self.layers[li + 1];
            next.label.push(l);
            next.log_p.push(p.ln());
            next.cost.push(r);
        }
        if self.layers[li + 1].len() > self.cap {
            return Err(Error::Capacity {
                layer: t + 1,
                cap: self.cap,
            });
        }
        let end = self.layers[li + 1].len();
        for c in start..end {
            let l = self.layers[li + 1].label[c];
            tree.push(l);
            self.visit(tree, t + 1)?;
            tree.pop();
        }
        self.scratch[li] = (labels, probs);
        Ok(())
    }
}

/// Optimal KL cost-to-go J(x,t) for every reachable state at one λ.
#[derive(Clone, Debug)]
pub struct DPTable {
    lattice: Arc<StateLattice>,
    lambda: f64,
    values: Vec<Vec<f64>>,
}

/// A successor state with its uncontrolled probability and cost-to-go.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Successor {
    pub label: Label,
    pub p: f64,
    pub value: f64,
}

impl DPTable {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lattice(&self) -> &Arc<StateLattice> {
        &self.lattice
    }

    pub fn t0(&self) -> usize {
        self.lattice.t0
    }

    pub fn horizon(&self) -> usize {
        self.lattice.horizon
    }

    /// J at the start state.
    pub fn initial_value(&self) -> f64 {
        self.values[0][0]
    }

    pub fn locate(&self, entries: &[Label]) -> Result<StateRef> {
        self.lattice.locate(entries)
    }

    pub fn value_at(&self, s: StateRef) -> f64 {
        self.values[s.layer][s.index]
    }

    /// J(x,t) with t = the number of entries of `x`.
    pub fn value(&self, x: &ParentVector) -> Result<f64> {
        Ok(self.value_at(self.locate(x.entries())?))
    }

    pub fn layer_values(&self, t: usize) -> &[f64] {
        &self.values[t - self.lattice.t0]
    }

    fn successor_refs(&self, s: StateRef) -> impl Iterator<Item = StateRef> + '_ {
        self.lattice.children(s).map(move |index| StateRef {
            layer: s.layer + 1,
            index,
        })
    }

    pub fn successors(&self, x: &ParentVector) -> Result<Vec<Successor>> {
        let s = self.locate(x.entries())?;
        self.check_not_final(s, x)?;
        Ok(self
            .successor_refs(s)
            .map(|c| Successor {
                label: self.lattice.label(c),
                p: self.lattice.log_p(c).exp(),
                value: self.value_at(c),
            })
            .collect())
    }

    fn check_not_final(&self, s: StateRef, x: &ParentVector) -> Result<()> {
        if s.layer + 1 == self.lattice.layers.len() {
            Err(Error::MissingState {
                state: format!("successors of {x} (final layer)"),
                t: x.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Writes labels, uncontrolled probabilities and optimal probabilities
    /// u*(x′|x) ∝ p(x′|x) exp(−J(x′)/λ) for the successors of `s`.
    pub fn fill_transition(
        &self,
        s: StateRef,
        labels: &mut Vec<Label>,
        p: &mut Vec<f64>,
        q: &mut Vec<f64>,
    ) {
        labels.clear();
        p.clear();
        q.clear();
        let mut best = f64::NEG_INFINITY;
        for c in self.successor_refs(s) {
            let lp = self.lattice.log_p(c);
            let score = lp - self.value_at(c) / self.lambda;
            labels.push(self.lattice.label(c));
            p.push(lp.exp());
            q.push(score);
            best = best.max(score);
        }
        let mut total = 0.0;
        for v in q.iter_mut() {
            *v = (*v - best).exp();
            total += *v;
        }
        q.iter_mut().for_each(|v| *v /= total);
    }

    /// Optimal transition distribution out of `x`, as (label, probability).
    pub fn optimal_transition(&self, x: &ParentVector) -> Result<Vec<(Label, f64)>> {
        let s = self.locate(x.entries())?;
        self.check_not_final(s, x)?;
        let (mut labels, mut p, mut q) = (Vec::new(), Vec::new(), Vec::new());
        self.fill_transition(s, &mut labels, &mut p, &mut q);
        Ok(labels.into_iter().zip(q).collect())
    }

    /// Follows the most probable optimal transition at every step; the
    /// lowest label wins ties.
    pub fn map_rollout(&self) -> Rollout {
        let mut s = StateRef { layer: 0, index: 0 };
        let mut actions = Vec::new();
        let mut total = self.lattice.cost(s);
        while s.layer + 1 < self.lattice.layers.len() {
            let mut best: Option<(StateRef, f64)> = None;
            for c in self.successor_refs(s) {
                let score = self.lattice.log_p(c) - self.value_at(c) / self.lambda;
                best = match best {
                    None => Some((c, score)),
                    Some((b, bs)) => {
                        let tol = TIE_TOLERANCE * bs.abs().max(score.abs()).max(1.0);
                        let label_lower = self.lattice.label(c) < self.lattice.label(b);
                        if score > bs + tol || (score >= bs - tol && label_lower) {
                            Some((c, score))
                        } else {
                            Some((b, bs))
                        }
                    }
                };
            }
            let (c, _) = best.expect("non-final states have successors");
            actions.push(self.lattice.label(c));
            total += self.lattice.cost(c);
            s = c;
        }
        let mut entries = self.lattice.start.entries().to_vec();
        entries.extend_from_slice(&actions);
        let final_state = ParentVector::from_entries(entries).expect("lattice paths are valid");
        Rollout {
            wait_steps: actions.iter().take_while(|&&l| l == NO_NODE).count(),
            end_cost: self.lattice.cost(s),
            total_cost: total,
            actions,
            final_state,
        }
    }
}

/// A MAP trajectory of the optimally controlled process.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Labels chosen from t0 to the horizon.
    pub actions: Vec<Label>,
    pub final_state: ParentVector,
    /// r at the horizon.
    pub end_cost: f64,
    /// Σ r along the trajectory including the start state.
    pub total_cost: f64,
    /// Leading "no addition" steps.
    pub wait_steps: usize,
}

/// Structure classes of the toy phase diagram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Structure {
    Chain5,
    Star5,
    Star10,
    Other,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Chain5 => "chain-5",
            Structure::Star5 => "star-5",
            Structure::Star10 => "star-10",
            Structure::Other => "other",
        })
    }
}

/// Classifies a final toy tree. "star-10" is the root with ten children.
pub fn classify_structure(x: &ParentVector) -> Structure {
    let n = x.node_count();
    let star = x.entries().iter().all(|&l| l == NO_NODE || l == ROOT);
    match n {
        5 if x.wiener_index() == chain_wiener(5) => Structure::Chain5,
        5 if star => Structure::Star5,
        11 if star => Structure::Star10,
        _ => Structure::Other,
    }
}

/// One row of a λ sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub end_cost: f64,
    pub final_node_count: usize,
    pub wait_steps: usize,
    pub structure: Structure,
    /// Optimal probabilities at the start state of "no addition" and of
    /// linking the root.
    pub p_no_add: f64,
    pub p_root: f64,
    #[serde(skip)]
    pub final_state: ParentVector,
}

/// MAP rollouts over a λ grid (deduplicated, ascending).
pub fn lambda_sweep(lattice: &Arc<StateLattice>, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid.iter()
        .map(|&lambda| {
            let dp = lattice.solve(lambda)?;
            let rollout = dp.map_rollout();
            let first = dp.optimal_transition(lattice.start())?;
            let prob = |label| {
                first
                    .iter()
                    .find(|&&(l, _)| l == label)
                    .map_or(0.0, |&(_, p)| p)
            };
            Ok(SweepRow {
                lambda,
                end_cost: rollout.end_cost,
                final_node_count: rollout.final_state.node_count(),
                wait_steps: rollout.wait_steps,
                structure: classify_structure(&rollout.final_state),
                p_no_add: prob(NO_NODE),
                p_root: prob(ROOT),
                final_state: rollout.final_state,
            })
        })
        .collect()
}

/// Adjacent grid points at which the MAP structure class changes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionBoundary {
    pub lambda_below: f64,
    pub lambda_above: f64,
    pub from: Structure,
    pub to: Structure,
}

pub fn region_boundaries(rows: &[SweepRow]) -> Vec<RegionBoundary> {
    rows.windows(2)
        .filter(|w| w[0].structure != w[1].structure)
        .map(|w| RegionBoundary {
            lambda_below: w[0].lambda,
            lambda_above: w[1].lambda,
            from: w[0].structure,
            to: w[1].structure,
        })
        .collect()
}

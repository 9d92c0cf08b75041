//! Growing labelled trees and the structural measures used as costs and features.
//!
//! A tree is stored as its parent vector: entry `t` is the parent label of the
//! node added by the transition out of time `t`, or `0` when nothing was added.
//! The root carries label 1 and is not recorded. Nodes are labelled in arrival
//! order, so every parent label is smaller than its child's label.
//!
//! [`ParentVector`] is the immutable value type. [`GrowingTree`] is the mutable
//! working copy used by samplers and solvers; it keeps child counts, arrival
//! times and a degree histogram up to date in O(1) per push/pop.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A node label. `0` is reserved for "no node added".
pub type Label = u32;

pub const NO_NODE: Label = 0;
pub const ROOT: Label = 1;

/// Default number of degree bins used by histogram features.
pub const DEFAULT_K_MAX: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParentVector {
    entries: Vec<Label>,
    node_count: usize,
}

impl ParentVector {
    /// The single-root tree.
    pub fn new() -> Self {
        ParentVector {
            entries: Vec::new(),
            node_count: 1,
        }
    }

    /// Builds a tree from raw entries, checking every entry against the node
    /// count reached so far.
    pub fn from_entries(entries: Vec<Label>) -> Result<Self> {
        let mut node_count = 1usize;
        for &label in &entries {
            if label as usize > node_count {
                return Err(Error::InvalidLabel { label, node_count });
            }
            if label != NO_NODE {
                node_count += 1;
            }
        }
        Ok(ParentVector {
            entries,
            node_count,
        })
    }

    pub fn entries(&self) -> &[Label] {
        &self.entries
    }

    /// Number of recorded transitions, which is also the time index of the state.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Number of non-root nodes (‖x‖₀ of the toy problem).
    pub fn added_nodes(&self) -> usize {
        self.node_count - 1
    }

    /// Returns a new tree with `label` appended; `self` is left untouched.
    pub fn extend(&self, label: Label) -> Result<ParentVector> {
        if label as usize > self.node_count {
            return Err(Error::InvalidLabel {
                label,
                node_count: self.node_count,
            });
        }
        let mut entries = Vec::with_capacity(self.entries.len() + 1);
        entries.extend_from_slice(&self.entries);
        entries.push(label);
        Ok(ParentVector {
            entries,
            node_count: self.node_count + usize::from(label != NO_NODE),
        })
    }

    /// Parent label of each node, indexed by `label - 1`. The root maps to 0.
    pub fn node_parents(&self) -> Vec<Label> {
        let mut parents = Vec::with_capacity(self.node_count);
        parents.push(NO_NODE);
        parents.extend(self.entries.iter().copied().filter(|&l| l != NO_NODE));
        parents
    }

    /// Reply counts indexed by `label - 1`.
    pub fn children_counts(&self) -> Vec<u32> {
        children_from_parents(&self.node_parents())
    }

    /// Degree as used by the thread features: replies plus the parent link,
    /// except for the root which has no parent.
    pub fn degree(&self, label: Label) -> Option<u32> {
        if label == NO_NODE || label as usize > self.node_count {
            return None;
        }
        let children = self.entries.iter().filter(|&&l| l == label).count() as u32;
        Some(children + u32::from(label != ROOT))
    }

    pub fn wiener_index(&self) -> u64 {
        wiener_from_parents(&self.node_parents())
    }

    /// Wiener index divided by the chain's Wiener index for the same node count.
    pub fn normalized_wiener(&self) -> Result<f64> {
        normalized_wiener(self.wiener_index(), self.node_count)
    }

    pub fn h_index(&self) -> u32 {
        h_index_from_children(&self.children_counts())
    }

    pub fn degree_histogram(&self, k_max: usize) -> DegreeHistogram {
        DegreeHistogram::from_children(&self.children_counts(), k_max)
    }

    /// Graphviz rendering. Nodes with at least `h` replies (the h-index core)
    /// are filled yellow.
    pub fn to_dot(&self, name: &str) -> String {
        let parents = self.node_parents();
        let children = children_from_parents(&parents);
        let h = h_index_from_children(&children);
        let mut out = String::new();
        let _ = writeln!(out, "graph \"{}\" {{", name.replace('"', "'"));
        let _ = writeln!(out, "  node [shape=circle, style=filled, fillcolor=white];");
        for (i, &c) in children.iter().enumerate() {
            if h > 0 && c >= h {
                let _ = writeln!(out, "  {} [fillcolor=yellow];", i + 1);
            }
        }
        for (i, &p) in parents.iter().enumerate().skip(1) {
            let _ = writeln!(out, "  {} -- {};", p, i + 1);
        }
        out.push_str("}\n");
        out
    }
}

impl fmt::Display for ParentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, label) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{label}")?;
        }
        Ok(())
    }
}

impl FromStr for ParentVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_line(s, 1)
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<ParentVector> {
    let entries = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<Label>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad label {tok:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ParentVector::from_entries(entries).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parses the text corpus format: one tree per line, space-separated entries,
/// an empty line for the root-only tree.
pub fn parse_corpus(text: &str) -> Result<Vec<ParentVector>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_line(line, i + 1))
        .collect()
}

pub fn write_corpus<'a>(trees: impl IntoIterator<Item = &'a ParentVector>) -> String {
    let mut out = String::new();
    for tree in trees {
        let _ = writeln!(out, "{tree}");
    }
    out
}

/// Counts of nodes per degree `1..=k_max`, plus an overflow bucket for larger
/// degrees. A root without replies has degree 0 and is not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeHistogram {
    counts: Vec<u64>,
    overflow: u64,
}

impl DegreeHistogram {
    pub fn from_children(children: &[u32], k_max: usize) -> Self {
        let mut counts = vec![0u64; k_max];
        let mut overflow = 0;
        for (i, &c) in children.iter().enumerate() {
            let degree = c as usize + usize::from(i != 0);
            if degree == 0 {
                continue;
            }
            if degree <= k_max {
                counts[degree - 1] += 1;
            } else {
                overflow += 1;
            }
        }
        DegreeHistogram { counts, overflow }
    }

    pub fn k_max(&self) -> usize {
        self.counts.len()
    }

    /// Count for degree `k`; degrees above `k_max` read from the overflow bucket.
    pub fn get(&self, k: usize) -> u64 {
        match k {
            0 => 0,
            k if k <= self.counts.len() => self.counts[k - 1],
            _ => self.overflow,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }
}

pub(crate) fn children_from_parents(parents: &[Label]) -> Vec<u32> {
    let mut children = vec![0u32; parents.len()];
    for &p in parents.iter().skip(1) {
        children[p as usize - 1] += 1;
    }
    children
}

/// Wiener index from node-indexed parents. Relies on parents having smaller
/// labels than their children, so one reverse sweep accumulates subtree sizes.
pub(crate) fn wiener_from_parents(parents: &[Label]) -> u64 {
    let n = parents.len() as u64;
    let mut sizes = vec![1u64; parents.len()];
    let mut total = 0;
    for i in (1..parents.len()).rev() {
        let s = sizes[i];
        total += s * (n - s);
        sizes[parents[i] as usize - 1] += s;
    }
    total
}

pub fn chain_wiener(n: usize) -> u64 {
    let n = n as u64;
    n * (n * n - 1) / 6
}

pub(crate) fn normalized_wiener(wiener: u64, node_count: usize) -> Result<f64> {
    if node_count < 2 {
        return Err(Error::UndefinedNormalization);
    }
    Ok(wiener as f64 / chain_wiener(node_count) as f64)
}

pub(crate) fn h_index_from_children(children: &[u32]) -> u32 {
    let n = children.len();
    let mut at_least = vec![0u32; n + 1];
    for &c in children {
        at_least[(c as usize).min(n)] += 1;
    }
    let mut cumulative = 0;
    for h in (1..=n).rev() {
        cumulative += at_least[h];
        if cumulative as usize >= h {
            return h as u32;
        }
    }
    0
}

/// Mutable tree with incrementally maintained reply counts, arrival times and
/// degree histogram. Used on every hot path; convert to [`ParentVector`] at
/// the boundaries.
#[derive(Clone, Debug)]
pub struct GrowingTree {
    entries: Vec<Label>,
    parents: Vec<Label>,
    children: Vec<u32>,
    arrivals: Vec<u32>,
    degree_counts: Vec<u32>,
}

impl Default for GrowingTree {
    fn default() -> Self {
        Self::new()
    }
}

impl GrowingTree {
    pub fn new() -> Self {
        GrowingTree {
            entries: Vec::new(),
            parents: vec![NO_NODE],
            children: vec![0],
            arrivals: vec![0],
            degree_counts: vec![1, 0],
        }
    }

    pub fn from_parent_vector(x: &ParentVector) -> Self {
        let mut tree = Self::new();
        for &label in x.entries() {
            tree.push(label);
        }
        tree
    }

    pub fn to_parent_vector(&self) -> ParentVector {
        ParentVector {
            entries: self.entries.clone(),
            node_count: self.parents.len(),
        }
    }

    pub fn time(&self) -> usize {
        self.entries.len()
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn entries(&self) -> &[Label] {
        &self.entries
    }

    pub fn node_parents(&self) -> &[Label] {
        &self.parents
    }

    pub fn children_counts(&self) -> &[u32] {
        &self.children
    }

    /// Arrival times indexed by label − 1.
    pub fn arrivals(&self) -> &[u32] {
        &self.arrivals
    }

    /// Replies received by `label`.
    #[inline]
    pub fn children(&self, label: Label) -> u32 {
        self.children[label as usize - 1]
    }

    #[inline]
    pub fn degree(&self, label: Label) -> u32 {
        self.children[label as usize - 1] + u32::from(label != ROOT)
    }

    /// Time step at which `label` arrived; the root arrives at 0.
    #[inline]
    pub fn arrival(&self, label: Label) -> u32 {
        self.arrivals[label as usize - 1]
    }

    /// Node counts indexed by degree (index 0 is the unreplied root, if any).
    pub fn degree_counts(&self) -> &[u32] {
        &self.degree_counts
    }

    pub fn is_valid_label(&self, label: Label) -> bool {
        label as usize <= self.parents.len()
    }

    pub fn try_push(&mut self, label: Label) -> Result<()> {
        if !self.is_valid_label(label) {
            return Err(Error::InvalidLabel {
                label,
                node_count: self.node_count(),
            });
        }
        self.push(label);
        Ok(())
    }

    /// Appends a transition. `label` must be at most the node count.
    #[inline]
    pub fn push(&mut self, label: Label) {
        debug_assert!(self.is_valid_label(label), "label {label} out of range");
        self.entries.push(label);
        if label == NO_NODE {
            return;
        }
        let d = self.degree(label) as usize;
        self.degree_counts[d] -= 1;
        if d + 1 >= self.degree_counts.len() {
            self.degree_counts.push(0);
        }
        self.degree_counts[d + 1] += 1;
        self.degree_counts[1] += 1;
        self.children[label as usize - 1] += 1;
        self.parents.push(label);
        self.children.push(0);
        self.arrivals.push(self.entries.len() as u32);
    }

    /// Undoes the last transition.
    pub fn pop(&mut self) -> Option<Label> {
        let label = self.entries.pop()?;
        if label == NO_NODE {
            return Some(label);
        }
        self.parents.pop();
        self.children.pop();
        self.arrivals.pop();
        self.degree_counts[1] -= 1;
        self.children[label as usize - 1] -= 1;
        let d = self.degree(label) as usize;
        self.degree_counts[d + 1] -= 1;
        self.degree_counts[d] += 1;
        if self.degree_counts.len() > 2 && self.degree_counts.last() == Some(&0) {
            self.degree_counts.pop();
        }
        Some(label)
    }

    /// Drops transitions until the tree is back at time `t`.
    pub fn truncate(&mut self, t: usize) {
        while self.entries.len() > t {
            self.pop();
        }
    }

    pub fn h_index(&self) -> u32 {
        h_index_from_children(&self.children)
    }

    pub fn wiener_index(&self) -> u64 {
        wiener_from_parents(&self.parents)
    }

    pub fn normalized_wiener(&self) -> Result<f64> {
        normalized_wiener(self.wiener_index(), self.node_count())
    }
}

//! State-dependent interaction graphs.
//!
//! Two agents interact while their opinions differ by strictly less than one.
//! Pairs at distance exactly one form the border set, where the vector field
//! is discontinuous. Exact equality is unrealizable in floating point, so the
//! border is a band of half-width `tol` around distance one.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::EdgeWeights;
use crate::{Error, Result};

/// Half-width of the border band used when no tolerance is given.
pub const DEFAULT_BORDER_TOL: f64 = 1e-9;

/// Unordered agent pair, stored with `i < j` (zero-based indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
}

impl Edge {
    /// Builds the pair `{a, b}`. Panics on self-loops.
    pub fn new(a: usize, b: usize) -> Self {
        assert_ne!(a, b, "self-loop {{{a}, {a}}}");
        if a < b {
            Edge { i: a, j: b }
        } else {
            Edge { i: b, j: a }
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.i == k || self.j == k
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one-based, matching the x1..xN column labels of exported files
        write!(f, "{{{}, {}}}", self.i + 1, self.j + 1)
    }
}

/// Vector of agent opinions, optionally annotated with a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpinionState {
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
}

impl OpinionState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidState("at least one agent is required".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!(
                "opinion x{} = {} is not finite",
                k + 1,
                values[k]
            )));
        }
        Ok(OpinionState { values, time: None })
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.time = Some(t);
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self) -> Option<f64> {
        self.time
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// `V(x) = ½ Σ x_i²`, nonincreasing along every solution.
    pub fn lyapunov(&self) -> f64 {
        0.5 * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    /// Shifts every opinion by `alpha`.
    pub fn translated(&self, alpha: f64) -> Self {
        OpinionState {
            values: self.values.iter().map(|v| v + alpha).collect(),
            time: self.time,
        }
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Open and border edge sets of the interaction graph at a given state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    n: usize,
    open: BTreeSet<Edge>,
    border: BTreeSet<Edge>,
}

impl InteractionGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn open_edges(&self) -> &BTreeSet<Edge> {
        &self.open
    }

    pub fn border_edges(&self) -> &BTreeSet<Edge> {
        &self.border
    }

    pub fn is_open(&self, e: Edge) -> bool {
        self.open.contains(&e)
    }

    pub fn is_border(&self, e: Edge) -> bool {
        self.border.contains(&e)
    }

    /// Edges of the closed graph: open and border edges together.
    pub fn closed_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.open.iter().chain(self.border.iter()).copied()
    }
}

/// Classifies every pair as open (`|Δ| < 1 - tol`), border (`||Δ| - 1| <= tol`)
/// or absent.
pub fn build_graph(x: &OpinionState, tol: f64) -> Result<InteractionGraph> {
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "border tolerance must be finite and nonnegative, got {tol}"
        )));
    }
    let v = x.values();
    let n = v.len();
    let mut open = BTreeSet::new();
    let mut border = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = (v[i] - v[j]).abs();
            if (d - 1.0).abs() <= tol {
                border.insert(Edge { i, j });
            } else if d < 1.0 - tol {
                open.insert(Edge { i, j });
            }
        }
    }
    Ok(InteractionGraph { n, open, border })
}

/// Weighted Laplacian: open edges carry weight one, border edges the weight
/// given in `beta` (zero when absent).
pub fn laplacian(g: &InteractionGraph, beta: &EdgeWeights) -> Result<DMatrix<f64>> {
    check_weights(g, beta)?;
    let n = g.n;
    let mut l = DMatrix::zeros(n, n);
    let weighted = g
        .open
        .iter()
        .map(|&e| (e, 1.0))
        .chain(g.border.iter().map(|&e| (e, beta.get(e).unwrap_or(0.0))));
    for (e, w) in weighted {
        l[(e.i, e.j)] -= w;
        l[(e.j, e.i)] -= w;
        l[(e.i, e.i)] += w;
        l[(e.j, e.j)] += w;
    }
    Ok(l)
}

pub(crate) fn check_weights(g: &InteractionGraph, beta: &EdgeWeights) -> Result<()> {
    for (e, _) in beta.iter() {
        if e.j >= g.n || !g.border.contains(&e) {
            return Err(Error::WeightMismatch { edge: e });
        }
    }
    Ok(())
}

/// Connected components of the open graph, or of the closed graph when
/// `closed` is set. Blocks are listed by smallest member.
pub fn connected_components(g: &InteractionGraph, closed: bool) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(g.n);
    for e in &g.open {
        uf.union(e.i, e.j);
    }
    if closed {
        for e in &g.border {
            uf.union(e.i, e.j);
        }
    }
    uf.blocks()
}

#[derive(Clone, Debug)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so block representatives are deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    pub(crate) fn blocks(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            let r = self.find(k);
            by_root[r].push(k);
        }
        by_root.into_iter().filter(|b| !b.is_empty()).collect()
    }
}

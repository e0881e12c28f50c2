//! The discontinuous vector field and its Krasovskii convexification.
//!
//! The set-valued right-hand side at `x` is the convex hull of
//! `-L^H(x) x` over subsets `H` of border edges. Because `-L^H(x) x` is
//! affine in the indicator vector of `H`, the hull is the image of the box
//! `[0, 1]^{border}` under `beta -> -L^beta(x) x`, so everything here works
//! with one weight per border edge instead of one coefficient per subset.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::{build_graph, check_weights, Edge, InteractionGraph, OpinionState, DEFAULT_BORDER_TOL};
use crate::{Error, Result};

/// Largest border set [`hull_vertices`] and [`in_hull`] will handle by default.
pub const DEFAULT_HULL_CAP: usize = 16;

/// Weights closer than this to 0 or 1 count as pinned to the box face.
pub const SURFACE_EPS: f64 = 1e-9;

const GS_MAX_SWEEPS: usize = 200_000;
const GS_STEP_TOL: f64 = 1e-15;

/// Convex weight `beta_ij` in `[0, 1]` per border edge.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights(BTreeMap<Edge, f64>);

impl EdgeWeights {
    pub fn new() -> Self {
        EdgeWeights(BTreeMap::new())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Edge, f64)>) -> Result<Self> {
        let mut w = EdgeWeights::new();
        for (e, b) in pairs {
            w.insert(e, b)?;
        }
        Ok(w)
    }

    /// Every edge in `edges` at the same weight.
    pub fn uniform<'a>(edges: impl IntoIterator<Item = &'a Edge>, weight: f64) -> Result<Self> {
        Self::from_pairs(edges.into_iter().map(|&e| (e, weight)))
    }

    pub fn insert(&mut self, edge: Edge, weight: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::WeightOutOfRange { edge, weight });
        }
        self.0.insert(edge, weight);
        Ok(())
    }

    pub fn get(&self, edge: Edge) -> Option<f64> {
        self.0.get(&edge).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Edge, f64)> + '_ {
        self.0.iter().map(|(&e, &w)| (e, w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Direction of a transversal crossing, relative to the unit-distance surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingDirection {
    /// The pair moves closer than one: the edge switches on.
    Inward,
    /// The pair separates beyond one: the edge switches off.
    Outward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClass {
    /// Every convex selection moves the pair through the surface the same way.
    TransversalCrossing { direction: CrossingDirection },
    /// A weight strictly inside `(0, 1)` keeps the pair exactly on the surface.
    Sliding { beta: f64 },
    /// The gap is stationary only at a face of the box (`stay_beta` is 0 or 1);
    /// the other face sends the pair across, so several continuations exist.
    Branching { stay_beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceVerdict {
    pub edge: Edge,
    pub class: SurfaceClass,
}

/// `-L^beta(x) x` on the graph built at the default border tolerance.
pub fn vector_field(x: &OpinionState, beta: &EdgeWeights) -> Result<Vec<f64>> {
    let g = build_graph(x, DEFAULT_BORDER_TOL)?;
    vector_field_on(x, &g, beta)
}

/// `-L^beta(x) x` on a prebuilt graph. Border edges missing from `beta`
/// take weight zero, the value of the threshold function at distance one.
pub fn vector_field_on(x: &OpinionState, g: &InteractionGraph, beta: &EdgeWeights) -> Result<Vec<f64>> {
    check_weights(g, beta)?;
    let xv = x.values();
    let mut v = vec![0.0; xv.len()];
    for e in g.open_edges() {
        add_edge(&mut v, xv, e.i, e.j, 1.0);
    }
    for e in g.border_edges() {
        add_edge(&mut v, xv, e.i, e.j, beta.get(*e).unwrap_or(0.0));
    }
    Ok(v)
}

#[inline]
pub(crate) fn add_edge(v: &mut [f64], x: &[f64], i: usize, j: usize, w: f64) {
    let d = w * (x[j] - x[i]);
    v[i] += d;
    v[j] -= d;
}

/// All `2^|border|` vertices `-L^H(x) x`, ordered by the bitmask of `H` over
/// the border edges in ascending order.
pub fn hull_vertices(x: &OpinionState) -> Result<Vec<Vec<f64>>> {
    hull_vertices_capped(x, DEFAULT_HULL_CAP)
}

pub fn hull_vertices_capped(x: &OpinionState, cap: usize) -> Result<Vec<Vec<f64>>> {
    let g = build_graph(x, DEFAULT_BORDER_TOL)?;
    let border: Vec<Edge> = g.border_edges().iter().copied().collect();
    if border.len() > cap {
        return Err(Error::HullCapExceeded { count: border.len(), cap });
    }
    let xv = x.values();
    let base = vector_field_on(x, &g, &EdgeWeights::new())?;
    let vertices = (0..1usize << border.len())
        .map(|mask| {
            let mut v = base.clone();
            for (k, e) in border.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    add_edge(&mut v, xv, e.i, e.j, 1.0);
                }
            }
            v
        })
        .collect();
    Ok(vertices)
}

/// Classifies the discontinuity surfaces of the `active` border edges.
///
/// The surface-normal derivatives `d/dt |x_i - x_j|` are affine in the
/// active weights; the joint system is solved on the box `[0, 1]^active` by
/// projected Gauss-Seidel and each edge is classified from its weight and
/// rate. Border edges outside `active` keep weight zero.
pub fn sliding_weights(x: &OpinionState, active: &[Edge]) -> Result<Vec<SurfaceVerdict>> {
    let g = build_graph(x, DEFAULT_BORDER_TOL)?;
    if let Some(&e) = active.iter().find(|e| !g.is_border(**e)) {
        return Err(Error::WeightMismatch { edge: e });
    }
    let base = vector_field_on(x, &g, &EdgeWeights::new())?;
    let sys = SurfaceSystem::new(x.values(), &base, active);
    let beta = sys.solve_box()?;
    Ok(active
        .iter()
        .zip(sys.classify(&beta))
        .map(|(&edge, class)| SurfaceVerdict { edge, class })
        .collect())
}

/// Whether `v` lies in the Krasovskii hull at `x`.
///
/// Solves the box-constrained least-squares problem
/// `min ||v0 + U beta - v||` over `beta` in `[0, 1]^border` and accepts when
/// the residual vanishes to `1e-9` relative accuracy.
pub fn in_hull(x: &OpinionState, v: &[f64]) -> Result<bool> {
    let g = build_graph(x, DEFAULT_BORDER_TOL)?;
    let border: Vec<Edge> = g.border_edges().iter().copied().collect();
    if border.len() > DEFAULT_HULL_CAP {
        return Err(Error::HullCapExceeded { count: border.len(), cap: DEFAULT_HULL_CAP });
    }
    if v.len() != x.len() {
        return Err(Error::InvalidParameter(format!(
            "velocity has {} components for {} agents",
            v.len(),
            x.len()
        )));
    }
    let xv = x.values();
    let base = vector_field_on(x, &g, &EdgeWeights::new())?;
    let target: DVector<f64> = DVector::from_iterator(v.len(), v.iter().zip(&base).map(|(a, b)| a - b));
    let k = border.len();
    let mut u = DMatrix::zeros(xv.len(), k);
    for (c, e) in border.iter().enumerate() {
        let d = xv[e.j] - xv[e.i];
        u[(e.i, c)] = d;
        u[(e.j, c)] = -d;
    }
    let q = u.transpose() * &u;
    let rhs = u.transpose() * &target;
    let mut beta = vec![0.5; k];
    for _ in 0..GS_MAX_SWEEPS {
        let mut step = 0.0f64;
        for e in 0..k {
            let qb: f64 = (0..k).map(|f| q[(e, f)] * beta[f]).sum();
            let next = (beta[e] + (rhs[e] - qb) / q[(e, e)]).clamp(0.0, 1.0);
            step = step.max((next - beta[e]).abs());
            beta[e] = next;
        }
        if step <= GS_STEP_TOL {
            break;
        }
    }
    let fit = &u * DVector::from_vec(beta);
    let residual = (fit - &target).norm();
    let scale = 1.0 + v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(residual <= 1e-9 * scale)
}

/// Linearised surface-normal rates `r(beta) = r0 + M beta` for a set of
/// border edges, each oriented from its lower to its higher opinion.
#[derive(Clone, Debug)]
pub(crate) struct SurfaceSystem {
    pub(crate) r0: Vec<f64>,
    pub(crate) m: DMatrix<f64>,
}

impl SurfaceSystem {
    /// `base` is the field with every listed edge at weight zero.
    pub(crate) fn new(x: &[f64], base: &[f64], edges: &[Edge]) -> Self {
        let k = edges.len();
        let orient: Vec<(usize, usize, f64)> = edges
            .iter()
            .map(|e| {
                if x[e.i] <= x[e.j] {
                    (e.i, e.j, x[e.j] - x[e.i])
                } else {
                    (e.j, e.i, x[e.i] - x[e.j])
                }
            })
            .collect();
        let r0 = orient.iter().map(|&(lo, hi, _)| base[hi] - base[lo]).collect();
        let mut m = DMatrix::zeros(k, k);
        for (a, &(lo_e, hi_e, _)) in orient.iter().enumerate() {
            for (b, &(lo_f, hi_f, d_f)) in orient.iter().enumerate() {
                // switching f on adds +d_f to lo_f and -d_f to hi_f
                let at = |node: usize| {
                    if node == lo_f {
                        d_f
                    } else if node == hi_f {
                        -d_f
                    } else {
                        0.0
                    }
                };
                m[(a, b)] = at(hi_e) - at(lo_e);
            }
        }
        SurfaceSystem { r0, m }
    }

    pub(crate) fn len(&self) -> usize {
        self.r0.len()
    }

    pub(crate) fn rate(&self, e: usize, beta: &[f64]) -> f64 {
        self.r0[e] + (0..self.len()).map(|f| self.m[(e, f)] * beta[f]).sum::<f64>()
    }

    /// Weights on `[0, 1]^k` that zero every rate they can; pinned weights sit
    /// on the face the rate pushes them towards.
    pub(crate) fn solve_box(&self) -> Result<Vec<f64>> {
        let k = self.len();
        let mut beta = vec![0.0; k];
        let mut converged = k == 0;
        for _ in 0..GS_MAX_SWEEPS {
            let mut step = 0.0f64;
            for e in 0..k {
                let next = (beta[e] - self.rate(e, &beta) / self.m[(e, e)]).clamp(0.0, 1.0);
                step = step.max((next - beta[e]).abs());
                beta[e] = next;
            }
            if step <= GS_STEP_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::DegenerateSurface(format!(
                "joint weight iteration did not settle on {k} surfaces"
            )));
        }
        // polish the free weights with an exact solve of their subsystem
        let free: Vec<usize> = (0..k).filter(|&e| beta[e] > 0.0 && beta[e] < 1.0).collect();
        if !free.is_empty() {
            let mf = DMatrix::from_fn(free.len(), free.len(), |a, b| self.m[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                let e = free[a];
                let pinned: f64 = (0..k)
                    .filter(|f| !free.contains(f))
                    .map(|f| self.m[(e, f)] * beta[f])
                    .sum();
                -(self.r0[e] + pinned)
            });
            if let Some(sol) = mf.lu().solve(&rhs) {
                if sol.iter().all(|b| (0.0..=1.0).contains(b)) {
                    for (a, &e) in free.iter().enumerate() {
                        beta[e] = sol[a];
                    }
                }
            }
        }
        Ok(beta)
    }

    /// Unconstrained weights zeroing every rate (minimum-norm when the
    /// surfaces are linearly dependent).
    pub(crate) fn solve_free(&self) -> Vec<f64> {
        let k = self.len();
        if k == 1 {
            return vec![-self.r0[0] / self.m[(0, 0)]];
        }
        let rhs = DVector::from_fn(k, |e, _| -self.r0[e]);
        // surfaces through nearly coincident agents are nearly parallel;
        // the minimum-norm solution shares their weight instead of blowing up
        let svd = self.m.clone().svd(true, true);
        let cutoff = 1e-10 * svd.singular_values.max();
        match svd.solve(&rhs, cutoff) {
            Ok(sol) => sol.iter().copied().collect(),
            Err(_) => vec![0.0; k],
        }
    }

    pub(crate) fn classify(&self, beta: &[f64]) -> Vec<SurfaceClass> {
        (0..self.len())
            .map(|e| {
                let b = beta[e];
                if b > SURFACE_EPS && b < 1.0 - SURFACE_EPS {
                    return SurfaceClass::Sliding { beta: b };
                }
                let face = if b <= SURFACE_EPS { 0.0 } else { 1.0 };
                let mut at_face = beta.to_vec();
                at_face[e] = face;
                let r = self.rate(e, &at_face);
                if face == 0.0 && r < -2.0 * SURFACE_EPS {
                    SurfaceClass::TransversalCrossing { direction: CrossingDirection::Inward }
                } else if face == 1.0 && r > 2.0 * SURFACE_EPS {
                    SurfaceClass::TransversalCrossing { direction: CrossingDirection::Outward }
                } else {
                    SurfaceClass::Branching { stay_beta: face }
                }
            })
            .collect()
    }
}

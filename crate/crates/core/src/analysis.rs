//! Equilibrium checks, cluster extraction, limit prediction and trajectory
//! invariant monitoring.

use serde::{Deserialize, Serialize};

use crate::graph::{build_graph, connected_components, mean, OpinionState};
use crate::integrator::Trajectory;
use crate::{Error, Result};

/// Default spread below which agents are considered one cluster.
pub const DEFAULT_MERGE_TOL: f64 = 1e-6;

pub const AVERAGE_DRIFT_TOL: f64 = 1e-10;
pub const HULL_EXPANSION_TOL: f64 = 1e-9;
pub const LYAPUNOV_INCREASE_TOL: f64 = 1e-9;
/// Slack on strict order and gap decay checks.
pub const ORDER_TOL: f64 = 1e-9;
/// Border band used when counting closed-graph components.
pub const COMPONENT_TOL: f64 = 1e-9;

/// Distance-like indicator of the equilibrium set: zero iff every pair is
/// either equal or at least one apart.
pub fn f_residual(x: &OpinionState) -> f64 {
    let v = x.values();
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let d = (v[i] - v[j]).abs();
            worst = worst.max(d.min((1.0 - d).max(0.0)));
        }
    }
    worst
}

/// Weak membership uses the residual alone; strong membership additionally
/// requires every unequal pair to sit more than `1 + tol` apart.
pub fn is_equilibrium(x: &OpinionState, tol: f64, strong: bool) -> bool {
    if f_residual(x) > tol {
        return false;
    }
    if !strong {
        return true;
    }
    let v = x.values();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let d = (v[i] - v[j]).abs();
            if d > tol && d <= 1.0 + tol {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    /// Agent indices per cluster, clusters in increasing value order.
    pub blocks: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub sizes: Vec<usize>,
    /// Distinct cluster values are at least `1 - merge_tol` apart.
    pub certified: bool,
    /// Chaining merged points spread wider than `2 * merge_tol`.
    pub ambiguous: bool,
}

impl ClusterPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Groups agents by chaining sorted neighbours no more than `merge_tol`
/// apart.
pub fn extract_clusters(x: &OpinionState, merge_tol: f64) -> Result<ClusterPartition> {
    if !(0.0..0.5).contains(&merge_tol) {
        return Err(Error::InvalidParameter(format!("merge_tol must lie in [0, 0.5), got {merge_tol}")));
    }
    let v = x.values();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));

    let mut blocks: Vec<Vec<usize>> = vec![vec![order[0]]];
    for w in order.windows(2) {
        if v[w[1]] - v[w[0]] <= merge_tol {
            blocks.last_mut().expect("nonempty").push(w[1]);
        } else {
            blocks.push(vec![w[1]]);
        }
    }
    let mut ambiguous = false;
    let mut values = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let members: Vec<f64> = b.iter().map(|&k| v[k]).collect();
        let spread = members.last().expect("nonempty") - members[0];
        ambiguous |= spread > 2.0 * merge_tol;
        values.push(mean(&members));
    }
    let certified = values.windows(2).all(|w| w[1] - w[0] >= 1.0 - merge_tol);
    for b in &mut blocks {
        b.sort_unstable();
    }
    let sizes = blocks.iter().map(Vec::len).collect();
    Ok(ClusterPartition {
        blocks,
        values,
        sizes,
        certified,
        ambiguous,
    })
}

/// How two consecutive groups separate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// The groups are already disconnected and evolve independently.
    Finite,
    /// The gap converges to one from below; the groups stay coupled forever.
    Asymptotic,
}

/// Limit values of consecutive groups of the sorted state.
///
/// Groups joined by [`Link::Asymptotic`] end exactly one apart, with the
/// chain's total mass preserved; groups separated by [`Link::Finite`] keep
/// their own mass. With two asymptotically linked groups of sizes `a` and
/// `N - a` this gives `(mean - (N - a)/N, mean + a/N)`.
pub fn predict_limit(x: &OpinionState, sizes: &[usize], links: &[Link]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InconsistentGroups("group sizes must be positive".into()));
    }
    if sizes.iter().sum::<usize>() != x.len() {
        return Err(Error::InconsistentGroups(format!(
            "group sizes sum to {} for {} agents",
            sizes.iter().sum::<usize>(),
            x.len()
        )));
    }
    if links.len() + 1 != sizes.len() {
        return Err(Error::InconsistentGroups(format!(
            "{} groups need {} links, got {}",
            sizes.len(),
            sizes.len() - 1,
            links.len()
        )));
    }
    let mut sorted = x.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut masses = Vec::with_capacity(sizes.len());
    let mut k = 0;
    for &s in sizes {
        masses.push(sorted[k..k + s].iter().sum::<f64>());
        k += s;
    }

    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    while start < sizes.len() {
        let mut end = start + 1;
        while end < sizes.len() && links[end - 1] == Link::Asymptotic {
            end += 1;
        }
        let count: usize = sizes[start..end].iter().sum();
        let mass: f64 = masses[start..end].iter().sum();
        let offsets: f64 = (start..end).map(|g| (sizes[g] * (g - start)) as f64).sum();
        let base = (mass - offsets) / count as f64;
        out.extend((0..end - start).map(|k| base + k as f64));
        start = end;
    }
    Ok(out)
}

/// Worst-case deviations from the qualitative properties every solution
/// satisfies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub max_average_drift: f64,
    pub max_hull_expansion: f64,
    pub order_violations: usize,
    pub max_lyapunov_increase: f64,
    pub component_count_decreases: usize,
}

impl InvariantReport {
    pub fn is_clean(&self) -> bool {
        self.max_average_drift <= AVERAGE_DRIFT_TOL
            && self.max_hull_expansion <= HULL_EXPANSION_TOL
            && self.order_violations == 0
            && self.max_lyapunov_increase <= LYAPUNOV_INCREASE_TOL
            && self.component_count_decreases == 0
    }
}

/// Scans consecutive samples for average drift, hull growth, order flips and
/// gap collapse faster than `exp(-3N dt)`, Lyapunov growth and closed-graph
/// reconnections.
pub fn monitor_invariants(traj: &Trajectory) -> InvariantReport {
    let mut report = InvariantReport::default();
    let Some(first) = traj.samples.first() else {
        return report;
    };
    let n = first.x.len();
    let mean0 = mean(&first.x);
    let components = |x: &[f64]| {
        let state = OpinionState::new(x.to_vec()).expect("finite samples");
        connected_components(&build_graph(&state, COMPONENT_TOL).expect("valid tolerance"), true).len()
    };
    let lyapunov = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let hull = |x: &[f64]| {
        x.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };

    let mut prev_components = components(&first.x);
    for w in traj.samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        report.max_average_drift = report.max_average_drift.max((mean(&b.x) - mean0).abs());

        let (lo_a, hi_a) = hull(&a.x);
        let (lo_b, hi_b) = hull(&b.x);
        let expansion = (lo_a - lo_b).max(hi_b - hi_a).max(0.0);
        report.max_hull_expansion = report.max_hull_expansion.max(expansion);

        report.max_lyapunov_increase = report.max_lyapunov_increase.max(lyapunov(&b.x) - lyapunov(&a.x));

        let decay = (-3.0 * n as f64 * (b.t - a.t)).exp();
        for i in 0..n {
            for j in 0..n {
                let gap_a = a.x[j] - a.x[i];
                if gap_a <= ORDER_TOL {
                    continue;
                }
                let gap_b = b.x[j] - b.x[i];
                if gap_b <= 0.0 || gap_b < gap_a * decay - ORDER_TOL {
                    report.order_violations += 1;
                }
            }
        }

        let c = components(&b.x);
        if c < prev_components {
            report.component_count_decreases += 1;
        }
        prev_components = c;
    }
    report
}

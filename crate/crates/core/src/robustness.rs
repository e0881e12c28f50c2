//! Robustness of clustered equilibria against one extra agent.
//!
//! Two adjacent clusters `A` (size `nA`) and `B` (size `nB >= nA`) at distance
//! `gap` survive every single perturbing agent iff `gap` exceeds a threshold
//! depending only on the sizes. For `nA < nB` the threshold involves the
//! negative root `t*` of
//!
//! ```text
//! (1/n) e^{-(n+1) t} + (nA/nB) (1 + 1/n) e^{-t} = 1,    n = nA + nB,
//! ```
//!
//! and equals `(1 + nA/nB)(1 + 1/n) e^{-t*}`; for equal sizes it is 2.
//!
//! With the perturbing agent at `x0` and the co-moving clusters at `xA`, `xB`,
//! the reduced coordinates `x = x0 - xA`, `y = xB - x0` obey a planar
//! piecewise-linear system. Merging happens exactly for starts in a region
//! bounded by the axes, the unit square and a solution curve through
//! `(1, (nA+1)/nB)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{extract_clusters, f_residual, is_equilibrium};
use crate::integrator::{integrate, rk4_step, SolverConfig};
use crate::{Error, OpinionState, Result};

/// Grid spacing of the default merge-witness search.
pub const WITNESS_GRID_STEP: f64 = 1e-3;

/// Reduced state below this level of `nA x² + nB y²` is certified to converge
/// to the origin.
const MERGE_CERTIFICATE: f64 = 0.99;

const BISECTION_ITERS: usize = 200;

fn ordered(n_a: usize, n_b: usize) -> Result<(usize, usize)> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Domain(format!("cluster sizes must be positive, got ({n_a}, {n_b})")));
    }
    Ok((n_a.min(n_b), n_a.max(n_b)))
}

/// Left-hand side of the defining equation of `t*`, minus one.
fn tstar_residual(n_a: usize, n_b: usize, t: f64) -> f64 {
    let n = (n_a + n_b) as f64;
    let ratio = n_a as f64 / n_b as f64;
    (-(n + 1.0) * t).exp() / n + ratio * (1.0 + 1.0 / n) * (-t).exp() - 1.0
}

/// Negative root `t*` for `nA < nB`, by bisection on
/// `[-ln(n)/(n+1), 0]`. Exactly zero when `nB = nA + 1`.
pub fn solve_tstar(n_a: usize, n_b: usize) -> Result<f64> {
    if n_a == 0 || n_a >= n_b {
        return Err(Error::Domain(format!("t* needs 1 <= nA < nB, got ({n_a}, {n_b})")));
    }
    if n_b == n_a + 1 {
        return Ok(0.0);
    }
    let n = (n_a + n_b) as f64;
    let (mut lo, mut hi) = (-n.ln() / (n + 1.0), 0.0f64);
    // the residual decreases in t: positive at lo, negative at 0
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tstar_residual(n_a, n_b, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rl, rh) = (tstar_residual(n_a, n_b, lo).abs(), tstar_residual(n_a, n_b, hi).abs());
    Ok(if rl < rh { lo } else { hi })
}

/// Smallest gap at which two adjacent clusters of the given sizes can still
/// be merged by one agent. Sizes may be given in either order.
pub fn threshold(n_a: usize, n_b: usize) -> Result<f64> {
    let (a, b) = ordered(n_a, n_b)?;
    if a == b {
        return Ok(2.0);
    }
    let t = solve_tstar(a, b)?;
    let n = (a + b) as f64;
    Ok((1.0 + a as f64 / b as f64) * (1.0 + 1.0 / n) * (-t).exp())
}

/// Large-population limit `1 + nA/nB` of [`threshold`].
pub fn asymptotic_threshold(n_a: usize, n_b: usize) -> Result<f64> {
    let (a, b) = ordered(n_a, n_b)?;
    Ok(1.0 + a as f64 / b as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Robust,
    NotRobust,
    /// Gap within `tol` of the threshold, where the strict criterion does not
    /// decide.
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(rename = "nA")]
    pub n_a: usize,
    #[serde(rename = "nB")]
    pub n_b: usize,
    pub gap: f64,
    /// `None` for equal sizes, where no root is involved.
    pub tstar: Option<f64>,
    pub threshold: f64,
    pub robust: bool,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub pairs: Vec<PairRecord>,
    pub overall: bool,
}

/// Checks every pair of adjacent clusters of an equilibrium.
pub fn is_robust(x: &OpinionState, tol: f64) -> Result<RobustnessReport> {
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!("tol must be finite and nonnegative, got {tol}")));
    }
    if !is_equilibrium(x, tol, false) {
        return Err(Error::NotEquilibrium { residual: f_residual(x) });
    }
    let clusters = extract_clusters(x, tol.min(0.49))?;
    let mut pairs = Vec::with_capacity(clusters.len().saturating_sub(1));
    for k in 1..clusters.len() {
        let (a, b) = ordered(clusters.sizes[k - 1], clusters.sizes[k])?;
        let gap = clusters.values[k] - clusters.values[k - 1];
        let tstar = if a == b { None } else { Some(solve_tstar(a, b)?) };
        let d = threshold(a, b)?;
        let robust = gap > d + tol;
        let verdict = if (gap - d).abs() <= tol {
            Verdict::Boundary
        } else if robust {
            Verdict::Robust
        } else {
            Verdict::NotRobust
        };
        pairs.push(PairRecord {
            n_a: a,
            n_b: b,
            gap,
            tstar,
            threshold: d,
            robust,
            verdict,
        });
    }
    let overall = pairs.iter().all(|p| p.robust);
    Ok(RobustnessReport { pairs, overall })
}

/// Position of the perturbing agent relative to both clusters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// `x0 - xA`
    pub x: f64,
    /// `xB - x0`
    pub y: f64,
}

impl ReducedState {
    pub fn new(x: f64, y: f64) -> Self {
        ReducedState { x, y }
    }
}

fn indicator(d: f64) -> f64 {
    if d.abs() < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Reduced planar field, ignoring the direct interaction of the clusters.
pub fn reduced_field(s: ReducedState, n_a: usize, n_b: usize) -> (f64, f64) {
    let (na, nb) = (n_a as f64, n_b as f64);
    let px = indicator(s.x) * s.x;
    let py = indicator(s.y) * s.y;
    (-(na + 1.0) * px + nb * py, na * px - (nb + 1.0) * py)
}

/// Point at time `t in [t*, 0]` on the solution through `(1, (nA+1)/nB)` that
/// bounds the merge region.
pub fn boundary_curve(n_a: usize, n_b: usize, t: f64) -> Result<(f64, f64)> {
    let tstar = solve_tstar(n_a, n_b)?;
    if !(t >= tstar && t <= 0.0) {
        return Err(Error::Domain(format!("t = {t} outside [{tstar}, 0]")));
    }
    Ok(curve_point(n_a, n_b, t))
}

fn curve_point(n_a: usize, n_b: usize, t: f64) -> (f64, f64) {
    let n = (n_a + n_b) as f64;
    let fast = (-(n + 1.0) * t).exp() / n;
    let slow = (1.0 + 1.0 / n) * (-t).exp();
    (-fast + slow, fast + n_a as f64 / n_b as f64 * slow)
}

/// Membership in the merge region of the reduced system.
pub fn region_contains(s: ReducedState, n_a: usize, n_b: usize) -> bool {
    if n_a == 0 || n_b == 0 {
        return false;
    }
    if !(s.x > 0.0 && s.x < 1.0 && s.y > 0.0 && s.y < 1.0) {
        return false;
    }
    if n_a == n_b {
        return true;
    }
    if n_a > n_b {
        return region_contains(ReducedState::new(s.y, s.x), n_b, n_a);
    }
    let corner = (n_a + 1) as f64 / n_b as f64;
    if s.y < corner {
        return true;
    }
    let tstar = solve_tstar(n_a, n_b).expect("sizes checked above");
    // the second component falls from 1 at t* to `corner` at 0
    let (mut lo, mut hi) = (tstar, 0.0f64);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if curve_point(n_a, n_b, mid).1 > s.y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    s.x <= curve_point(n_a, n_b, 0.5 * (lo + hi)).0
}

fn check_placement(x_a: f64, x_b: f64, n_a: usize, n_b: usize, x0: f64) -> Result<()> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Domain(format!("cluster sizes must be positive, got ({n_a}, {n_b})")));
    }
    if !(x_a.is_finite() && x_b.is_finite() && x0.is_finite()) {
        return Err(Error::Domain("positions must be finite".into()));
    }
    if !(x_a < x0 && x0 < x_b) {
        return Err(Error::Domain(format!("need xA < x0 < xB, got {x_a}, {x0}, {x_b}")));
    }
    if x_b - x_a < 1.0 {
        return Err(Error::Domain(format!("clusters {} apart already interact", x_b - x_a)));
    }
    Ok(())
}

/// Whether one agent placed at `x0` between co-moving clusters at `xA` and
/// `xB` makes them merge.
///
/// Pairs at distance up to `1 + cfg.event_tol` interact, so a start exactly
/// on a unit gap is continued along the side that is favourable to merging.
/// The run stops as soon as the agent detaches from a cluster or the state
/// enters an ellipse around the origin that no solution leaves.
pub fn simulate_perturbation(x_a: f64, x_b: f64, n_a: usize, n_b: usize, x0: f64, cfg: &SolverConfig) -> Result<bool> {
    check_placement(x_a, x_b, n_a, n_b, x0)?;
    cfg.validate()?;
    let (na, nb) = (n_a as f64, n_b as f64);
    let reach = 1.0 + cfg.event_tol;
    let on = |d: f64| if d.abs() <= reach { d } else { 0.0 };
    let field = |s: &[f64]| {
        let (px, py, pab) = (on(s[0]), on(s[1]), on(s[0] + s[1]));
        vec![
            -(na + 1.0) * px + nb * py - nb * pab,
            na * px - (nb + 1.0) * py - na * pab,
        ]
    };
    let level = MERGE_CERTIFICATE * na.min(nb);
    let mut s = vec![x0 - x_a, x_b - x0];
    let mut t = 0.0;
    loop {
        if s[0] > reach || s[1] > reach {
            return Ok(false);
        }
        if na * s[0] * s[0] + nb * s[1] * s[1] < level {
            return Ok(true);
        }
        if t >= cfg.t_max {
            return Ok(false);
        }
        s = rk4_step(field, &s, cfg.dt_max);
        t += cfg.dt_max;
    }
}

/// Spot check of [`simulate_perturbation`] on all `nA + nB + 1` agents with
/// the regular integrator. Merged iff the two cluster limits end closer than
/// one half.
pub fn simulate_perturbation_full(
    x_a: f64,
    x_b: f64,
    n_a: usize,
    n_b: usize,
    x0: f64,
    cfg: &SolverConfig,
) -> Result<bool> {
    check_placement(x_a, x_b, n_a, n_b, x0)?;
    let mut v = vec![x_a; n_a];
    v.push(x0);
    v.extend(std::iter::repeat_n(x_b, n_b));
    let traj = integrate(&OpinionState::new(v)?, cfg)?;
    let xf = traj.final_state();
    let xf = xf.values();
    Ok((xf[n_a + 1] - xf[0]).abs() < 0.5)
}

/// First placement of the extra agent, as an offset from cluster `A`, that
/// merges clusters `gap` apart. The two unit-distance placements are tried
/// before a uniform grid of spacing `step`.
pub fn find_merge_witness(n_a: usize, n_b: usize, gap: f64, step: f64, cfg: &SolverConfig) -> Result<Option<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid step must be positive, got {step}")));
    }
    if !(gap >= 1.0 && gap.is_finite()) {
        return Err(Error::Domain(format!("gap must be at least 1, got {gap}")));
    }
    let mut candidates = vec![1.0, gap - 1.0];
    let cells = (gap / step).ceil() as usize;
    candidates.extend((1..cells).map(|k| k as f64 * step));
    candidates.retain(|&c| c > 0.0 && c < gap);

    let hit = candidates
        .par_iter()
        .map(|&c| simulate_perturbation(0.0, gap, n_a, n_b, c, cfg).map(|m| m.then_some(c)))
        .find_first(|r| !matches!(r, Ok(None)));
    hit.transpose().map(Option::flatten)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: &[f64]) -> OpinionState {
        OpinionState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tstar_examples() {
        assert_eq!(solve_tstar(1, 2).unwrap(), 0.0);
        assert_eq!(solve_tstar(2, 3).unwrap(), 0.0);
        assert!((solve_tstar(1, 3).unwrap() + 0.145_695_758_224_907_13).abs() < 1e-13);
        let s = (-solve_tstar(1, 4).unwrap()).exp();
        assert!((0.2 * s.powi(6) + 0.3 * s - 1.0).abs() < 1e-12);
        assert!(matches!(solve_tstar(3, 3), Err(Error::Domain(_))));
        assert!(solve_tstar(4, 3).is_err());
        assert!(solve_tstar(0, 3).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(3, 3).unwrap(), 2.0);
        assert_eq!(threshold(1, 2).unwrap(), 2.0);
        assert_eq!(threshold(3, 1).unwrap(), threshold(1, 3).unwrap());
        assert!((threshold(1, 3).unwrap() - 1.928_073_623_632_984_5).abs() < 1e-12);
        assert!(threshold(0, 3).is_err());
        assert_eq!(asymptotic_threshold(4, 8).unwrap(), 1.5);
        assert_eq!(asymptotic_threshold(5, 5).unwrap(), 2.0);
        assert!((threshold(1, 3).unwrap() - asymptotic_threshold(1, 3).unwrap() - 0.5947).abs() < 1e-3);
    }

    #[test]
    fn robustness_examples() {
        let r = is_robust(&state(&[0.0, 0.0, 0.0, 2.5, 2.5, 2.5]), 1e-9).unwrap();
        assert!(r.overall);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].tstar, None);
        assert_eq!(r.pairs[0].verdict, Verdict::Robust);

        let r = is_robust(&state(&[0.0, 1.5, 1.5, 1.5]), 1e-9).unwrap();
        assert!(!r.overall);
        assert_eq!((r.pairs[0].n_a, r.pairs[0].n_b), (1, 3));
        assert_eq!(r.pairs[0].verdict, Verdict::NotRobust);

        let r = is_robust(&state(&[0.4, 0.4]), 1e-9).unwrap();
        assert!(r.overall && r.pairs.is_empty());

        let r = is_robust(&state(&[0.0, 2.0]), 1e-9).unwrap();
        assert_eq!(r.pairs[0].verdict, Verdict::Boundary);
        assert!(!r.overall);

        assert!(matches!(
            is_robust(&state(&[0.0, 0.5]), 1e-9),
            Err(Error::NotEquilibrium { .. })
        ));
    }

    #[test]
    fn report_json_shape() {
        let r = is_robust(&state(&[0.0, 1.5, 1.5, 1.5]), 1e-9).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let p = &v["pairs"][0];
        for key in ["nA", "nB", "gap", "tstar", "threshold", "robust"] {
            assert!(p.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["overall"], false);
    }

    #[test]
    fn reduced_field_examples() {
        assert_eq!(reduced_field(ReducedState::new(0.0, 0.0), 1, 3), (0.0, 0.0));
        // just below x = 1 the x-component is positive iff y exceeds (nA+1)/nB
        let below = 1.0 - 1e-12;
        assert!(reduced_field(ReducedState::new(below, 0.7), 1, 3).0 > 0.0);
        assert!(reduced_field(ReducedState::new(below, 0.6), 1, 3).0 < 0.0);
        // and {y = 1} repels from below
        for x in [0.1, 0.5, 0.99] {
            assert!(reduced_field(ReducedState::new(x, below), 1, 3).1 < 0.0);
        }
    }

    #[test]
    fn curve_examples() {
        assert_eq!(boundary_curve(1, 3, 0.0).unwrap(), (1.0, 2.0 / 3.0));
        let ts = solve_tstar(1, 3).unwrap();
        let (_, y) = boundary_curve(1, 3, ts).unwrap();
        assert!((y - 1.0).abs() < 1e-12);
        assert!(boundary_curve(1, 3, 0.1).is_err());
        assert!(boundary_curve(1, 3, ts - 0.1).is_err());
        assert!(boundary_curve(2, 2, 0.0).is_err());
    }

    #[test]
    fn region_examples() {
        assert!(region_contains(ReducedState::new(0.2, 0.2), 1, 3));
        assert!(region_contains(ReducedState::new(0.9, 0.9), 1, 2));
        assert!(!region_contains(ReducedState::new(1.5, 0.5), 1, 3));
        assert!(!region_contains(ReducedState::new(0.99, 0.99), 1, 3));
        assert!(region_contains(ReducedState::new(0.99, 0.99), 4, 4));
        // mirrored sizes mirror the region
        assert!(!region_contains(ReducedState::new(0.99, 0.99), 3, 1));
        assert!(region_contains(ReducedState::new(0.9, 0.5), 1, 3) == region_contains(ReducedState::new(0.5, 0.9), 3, 1));
    }

    #[test]
    fn perturbation_examples() {
        let cfg = SolverConfig::default();
        for k in 1..25 {
            let x0 = 0.1 * k as f64;
            assert!(!simulate_perturbation(0.0, 2.5, 3, 3, x0, &cfg).unwrap());
        }
        assert!(simulate_perturbation(0.0, 1.5, 1, 3, 0.75, &cfg).unwrap());
        assert!(simulate_perturbation(0.0, 1.5, 1, 3, 0.5, &cfg).unwrap());
        assert!(!simulate_perturbation(0.0, 2.0, 1, 3, 0.5, &cfg).unwrap());
        assert!(simulate_perturbation(0.0, 1.5, 1, 3, 2.0, &cfg).is_err());
        assert!(simulate_perturbation(0.0, 0.5, 1, 3, 0.2, &cfg).is_err());
    }

    #[test]
    fn no_witness_above_threshold() {
        let cfg = SolverConfig::default();
        assert_eq!(find_merge_witness(1, 3, 2.0, WITNESS_GRID_STEP, &cfg).unwrap(), None);
        assert!(find_merge_witness(1, 3, 1.5, WITNESS_GRID_STEP, &cfg).unwrap().is_some());
    }

    #[test]
    fn full_system_agrees_on_clear_cases() {
        let cfg = SolverConfig::default().with_t_max(100.0);
        assert!(simulate_perturbation_full(0.0, 1.5, 1, 3, 0.75, &cfg).unwrap());
        assert!(!simulate_perturbation_full(0.0, 2.5, 3, 3, 1.25, &cfg).unwrap());
    }
}

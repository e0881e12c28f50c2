//! Event-driven integration of Krasovskii solutions.
//!
//! Every agent pair carries a mode: `On` (weight one), `Off` (weight zero)
//! or `Slide` (the weight that keeps the pair exactly at distance one).
//! Between events the modes are fixed and the flow is smooth, so it is
//! advanced with the classical fourth-order Runge-Kutta method. A mode's
//! guard is violated when an `On` pair separates past one, an `Off` pair
//! closes below one, or a sliding weight leaves `[0, 1]`; the first violation
//! inside a step is localised by bisection on Runge-Kutta sub-steps from the
//! start of the step. At an event all pairs within `event_tol` of the
//! surface are classified jointly and the policy picks their new modes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{f_residual, predict_limit, Link};
use crate::dynamics::{add_edge, CrossingDirection, SurfaceClass, SurfaceSystem, SURFACE_EPS};
use crate::graph::{Edge, OpinionState, UnionFind};
use crate::{Error, Result};

pub const DEFAULT_DT_MAX: f64 = 1e-2;
pub const DEFAULT_EVENT_TOL: f64 = 1e-9;
pub const DEFAULT_CONV_TOL: f64 = 1e-8;
pub const DEFAULT_T_MAX: f64 = 200.0;
pub const DEFAULT_BOUNDARY_BAND: f64 = 1e-3;

/// Agents closer than this are moved together under [`Policy::Proper`].
pub const EQUALITY_TOL: f64 = 1e-12;

/// Sliding weights may overshoot `[0, 1]` by this much before an exit fires.
const SLIDE_EXIT_TOL: f64 = 1e-9;

/// Consecutive zero-length events tolerated before giving up.
const MAX_STALLED_EVENTS: usize = 1000;

/// How a trajectory continues where Krasovskii solutions are not unique.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Carathéodory continuation: border edges are off, equal agents stay
    /// equal.
    Proper,
    /// Slide along surfaces whenever a sliding weight exists.
    Sliding,
    /// Slide where possible; at branching surfaces draw stay, cross or detach
    /// uniformly from a seeded generator.
    Sampled { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Step cap for the Runge-Kutta stepper.
    pub dt_max: f64,
    /// Surface localisation tolerance on `| |x_i - x_j| - 1 |`.
    pub event_tol: f64,
    /// Equilibrium detection threshold.
    pub conv_tol: f64,
    pub t_max: f64,
    pub policy: Policy,
    /// Width of the band below one in which a gap counts as converging to the
    /// boundary asymptotically.
    pub boundary_band: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt_max: DEFAULT_DT_MAX,
            event_tol: DEFAULT_EVENT_TOL,
            conv_tol: DEFAULT_CONV_TOL,
            t_max: DEFAULT_T_MAX,
            policy: Policy::Proper,
            boundary_band: DEFAULT_BOUNDARY_BAND,
        }
    }
}

impl SolverConfig {
    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_t_max(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dt_max", self.dt_max),
            ("event_tol", self.event_tol),
            ("conv_tol", self.conv_tol),
            ("t_max", self.t_max),
            ("boundary_band", self.boundary_band),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EdgeDeactivate,
    EdgeActivate,
    SlideEnter,
    SlideExit,
    BranchTaken,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub edge: Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Converged,
    AsymptoticBoundary,
    TMaxReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub terminal: Terminal,
    /// Limit predicted from the cluster structure when the run stopped on an
    /// asymptotic boundary approach.
    pub predicted_limit: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn final_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn final_state(&self) -> OpinionState {
        let s = self.samples.last().expect("trajectory has at least one sample");
        OpinionState::new(s.x.clone()).expect("integrated states are finite").at_time(s.t)
    }

    /// Writes `t,x1,...,xN` rows at 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.n()).map(|k| format!("x{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            write!(w, "{:.16e}", s.t)?;
            for v in &s.x {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Writes one `{"t":..,"kind":..,"i":..,"j":..}` object per line, with
    /// one-based agent indices.
    pub fn write_events_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Line {
            t: f64,
            kind: EventKind,
            i: usize,
            j: usize,
        }
        for e in &self.events {
            let line = Line {
                t: e.time,
                kind: e.kind,
                i: e.edge.i + 1,
                j: e.edge.j + 1,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A piece of solution between two times, evaluable anywhere inside.
pub trait DenseSegment {
    fn start(&self) -> f64;
    fn end(&self) -> f64;
    fn state_at(&self, t: f64) -> Vec<f64>;
}

/// Time in `[start, end]` at which the pair `edge` is within `event_tol` of
/// unit distance, found by bisection. A segment already on the surface at its
/// start returns the start.
pub fn locate_event(seg: &impl DenseSegment, edge: Edge, event_tol: f64) -> Result<f64> {
    let phi = |t: f64| {
        let x = seg.state_at(t);
        (x[edge.i] - x[edge.j]).abs() - 1.0
    };
    let (mut lo, mut hi) = (seg.start(), seg.end());
    let f_lo = phi(lo);
    if f_lo.abs() <= event_tol {
        return Ok(lo);
    }
    let f_hi = phi(hi);
    if f_hi.abs() > event_tol && f_hi.signum() == f_lo.signum() {
        return Err(Error::NoEvent { edge, start: lo, end: hi });
    }
    let side = f_lo.signum();
    let mut best = (f_hi.abs(), hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = phi(mid);
        if f.abs() <= event_tol {
            return Ok(mid);
        }
        if f.abs() < best.0 {
            best = (f.abs(), mid);
        }
        if f.signum() == side {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(best.1)
}

/// Exact fixed-topology propagation `exp(-L dt) x` through the symmetric
/// eigendecomposition of `L`. `dt` may be `f64::INFINITY`.
pub fn flow_exact(x: &OpinionState, l: &DMatrix<f64>, dt: f64) -> Result<OpinionState> {
    let n = x.len();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::InvalidParameter(format!(
            "Laplacian is {}x{} for {n} agents",
            l.nrows(),
            l.ncols()
        )));
    }
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::InvalidParameter(format!("dt must be nonnegative, got {dt}")));
    }
    let eig = l.clone().symmetric_eigen();
    let scale = l.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let decay = eig.eigenvalues.map(|lambda| {
        if lambda.abs() <= 1e-12 * scale {
            1.0
        } else {
            (-lambda * dt).exp()
        }
    });
    let q = &eig.eigenvectors;
    let xv = nalgebra::DVector::from_column_slice(x.values());
    let coords = q.transpose() * xv;
    let out = q * coords.component_mul(&decay);
    OpinionState::new(out.iter().copied().collect())
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(field: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k1 = field(x);
    let y: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
    let k2 = field(&y);
    let y: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
    let k3 = field(&y);
    let y: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
    let k4 = field(&y);
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates a Krasovskii solution from `x0` until it settles on an
/// equilibrium, approaches a boundary configuration asymptotically, or
/// reaches `cfg.t_max`.
pub fn integrate(x0: &OpinionState, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    Engine::new(x0.len(), cfg).run(x0.values().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    On,
    Off,
    Slide,
}

#[derive(Clone, Copy, Debug)]
enum Guard {
    Pair(Edge),
    SlideExit { edge: Edge, face: f64 },
}

struct Engine<'c> {
    cfg: &'c SolverConfig,
    n: usize,
    modes: Vec<Mode>,
    on: Vec<Edge>,
    slide: Vec<Edge>,
    rng: Option<ChaCha8Rng>,
    groups: Option<UnionFind>,
    border: BTreeSet<Edge>,
    events: Vec<Event>,
    samples: Vec<Sample>,
}

/// Runge-Kutta sub-steps of one fixed-mode step, used for event bisection.
struct StepSegment<'a, 'c> {
    engine: &'a Engine<'c>,
    x0: &'a [f64],
    t0: f64,
    h: f64,
}

impl DenseSegment for StepSegment<'_, '_> {
    fn start(&self) -> f64 {
        self.t0
    }

    fn end(&self) -> f64 {
        self.t0 + self.h
    }

    fn state_at(&self, t: f64) -> Vec<f64> {
        let tau = (t - self.t0).clamp(0.0, self.h);
        if tau == 0.0 {
            return self.x0.to_vec();
        }
        self.engine.step(self.x0, tau)
    }
}

impl<'c> Engine<'c> {
    fn new(n: usize, cfg: &'c SolverConfig) -> Self {
        let rng = match cfg.policy {
            Policy::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let groups = matches!(cfg.policy, Policy::Proper).then(|| UnionFind::new(n));
        Engine {
            cfg,
            n,
            modes: vec![Mode::Off; n * n],
            on: Vec::new(),
            slide: Vec::new(),
            rng,
            groups,
            border: BTreeSet::new(),
            events: Vec::new(),
            samples: Vec::new(),
        }
    }

    fn mode(&self, e: Edge) -> Mode {
        self.modes[e.i * self.n + e.j]
    }

    fn set_mode(&mut self, e: Edge, m: Mode) {
        self.modes[e.i * self.n + e.j] = m;
    }

    fn rebuild_lists(&mut self) {
        self.on.clear();
        self.slide.clear();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let e = Edge { i, j };
                match self.mode(e) {
                    Mode::On => self.on.push(e),
                    Mode::Slide => self.slide.push(e),
                    Mode::Off => {}
                }
            }
        }
    }

    /// Field under the current modes, with the sliding weights it used.
    fn field(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; x.len()];
        for e in &self.on {
            add_edge(&mut v, x, e.i, e.j, 1.0);
        }
        if self.slide.is_empty() {
            return (v, Vec::new());
        }
        let beta = SurfaceSystem::new(x, &v, &self.slide).solve_free();
        for (e, b) in self.slide.iter().zip(&beta) {
            add_edge(&mut v, x, e.i, e.j, *b);
        }
        (v, beta)
    }

    fn step(&self, x: &[f64], h: f64) -> Vec<f64> {
        rk4_step(|y| self.field(y).0, x, h)
    }

    fn co_move(&mut self, x: &mut [f64]) {
        let Some(groups) = self.groups.as_mut() else {
            return;
        };
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                if (x[i] - x[j]).abs() <= EQUALITY_TOL {
                    groups.union(i, j);
                }
            }
        }
        for block in groups.blocks().into_iter().filter(|b| b.len() > 1) {
            let m = block.iter().map(|&k| x[k]).sum::<f64>() / block.len() as f64;
            for k in block {
                x[k] = m;
            }
        }
    }

    fn push_event(&mut self, time: f64, kind: EventKind, edge: Edge) {
        self.events.push(Event { time, kind, edge });
    }

    fn violations(&self, x: &[f64], beta: &[f64]) -> Vec<Guard> {
        let tol = self.cfg.event_tol;
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let e = Edge { i, j };
                let phi = (x[i] - x[j]).abs() - 1.0;
                match self.mode(e) {
                    Mode::On if phi > tol => out.push(Guard::Pair(e)),
                    Mode::Off if phi < -tol => out.push(Guard::Pair(e)),
                    _ => {}
                }
            }
        }
        for (e, b) in self.slide.iter().zip(beta) {
            if *b < -SLIDE_EXIT_TOL {
                out.push(Guard::SlideExit { edge: *e, face: 0.0 });
            } else if *b > 1.0 + SLIDE_EXIT_TOL {
                out.push(Guard::SlideExit { edge: *e, face: 1.0 });
            }
        }
        out
    }

    /// Offset from the start of the step at which `guard` fires.
    fn locate(&self, seg: &StepSegment<'_, 'c>, guard: Guard) -> f64 {
        match guard {
            // a guard already violated at the start of the step fires there
            Guard::Pair(e) => locate_event(seg, e, self.cfg.event_tol).map_or(0.0, |t| t - seg.t0),
            Guard::SlideExit { edge, face } => {
                let k = self.slide.iter().position(|s| *s == edge).expect("sliding edge");
                let psi = |tau: f64| {
                    let x = seg.state_at(seg.t0 + tau);
                    self.field(&x).1[k] - face
                };
                let (mut lo, mut hi) = (0.0, seg.h);
                let side = psi(lo).signum();
                if psi(lo).abs() <= SLIDE_EXIT_TOL {
                    return 0.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let f = psi(mid);
                    if f.abs() <= SLIDE_EXIT_TOL {
                        return mid;
                    }
                    if f.signum() == side {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= f64::EPSILON * seg.h {
                        break;
                    }
                }
                hi
            }
        }
    }

    fn pairs_on_surface(&self, x: &[f64]) -> BTreeSet<Edge> {
        let tol = self.cfg.event_tol;
        let mut out = BTreeSet::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if ((x[i] - x[j]).abs() - 1.0).abs() <= tol {
                    out.insert(Edge { i, j });
                }
            }
        }
        out
    }

    /// Chooses modes for every pair on the surface at `x`.
    ///
    /// `forced` holds pairs that already re-violated their guard at this same
    /// instant; they take the mode their violation points to.
    fn resolve(&mut self, t: f64, x: &[f64], forced: &BTreeMap<Edge, Mode>) -> Result<()> {
        let surface = self.pairs_on_surface(x);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let e = Edge { i, j };
                if surface.contains(&e) {
                    continue;
                }
                let geometric = if (x[i] - x[j]).abs() < 1.0 { Mode::On } else { Mode::Off };
                let prev = self.mode(e);
                self.transition(t, e, prev, geometric);
            }
        }
        self.rebuild_lists();
        let edges: Vec<Edge> = surface.iter().copied().collect();
        let mut base = vec![0.0; x.len()];
        for e in self.on.iter().filter(|e| !surface.contains(e)) {
            add_edge(&mut base, x, e.i, e.j, 1.0);
        }
        let sys = SurfaceSystem::new(x, &base, &edges);
        let beta = sys.solve_box()?;
        let classes = sys.classify(&beta);

        for (&e, class) in edges.iter().zip(classes) {
            let prev = self.mode(e);
            let fresh = !self.border.contains(&e);
            let mut branched = false;
            let next = if let Some(&m) = forced.get(&e) {
                m
            } else {
                match class {
                    SurfaceClass::TransversalCrossing { direction: CrossingDirection::Inward } => Mode::On,
                    SurfaceClass::TransversalCrossing { direction: CrossingDirection::Outward } => Mode::Off,
                    _ if !fresh => prev,
                    SurfaceClass::Sliding { .. } => match self.cfg.policy {
                        Policy::Proper => Mode::Off,
                        _ => Mode::Slide,
                    },
                    SurfaceClass::Branching { stay_beta } => {
                        branched = true;
                        match self.cfg.policy {
                            Policy::Proper => Mode::Off,
                            Policy::Sliding if stay_beta == 0.0 => Mode::On,
                            Policy::Sliding => Mode::Off,
                            Policy::Sampled { .. } => {
                                let rng = self.rng.as_mut().expect("sampled policy carries a generator");
                                [Mode::Slide, Mode::On, Mode::Off][rng.gen_range(0..3)]
                            }
                        }
                    }
                }
            };
            if branched {
                self.push_event(t, EventKind::BranchTaken, e);
            }
            self.transition(t, e, prev, next);
        }
        self.rebuild_lists();
        self.repair(t, x, &surface);
        self.border = surface;
        Ok(())
    }

    /// Flips the worst inconsistent surface pair until every `On` pair closes
    /// or holds, every `Off` pair opens or holds and every sliding weight is
    /// admissible. Per-edge choices can clash once coupled through a shared
    /// agent.
    fn repair(&mut self, t: f64, x: &[f64], surface: &BTreeSet<Edge>) {
        for _ in 0..4 * surface.len() + 10 {
            let (v, beta) = self.field(x);
            let mut worst: Option<(f64, Edge, Mode)> = None;
            let mut consider = |excess: f64, e: Edge, next: Mode| {
                if worst.is_none_or(|(w, _, _)| excess > w) {
                    worst = Some((excess, e, next));
                }
            };
            for (e, b) in self.slide.iter().zip(&beta) {
                if *b < -SLIDE_EXIT_TOL {
                    consider(-b, *e, Mode::On);
                } else if *b > 1.0 + SLIDE_EXIT_TOL {
                    consider(b - 1.0, *e, Mode::Off);
                }
            }
            for &e in surface {
                let rate = (x[e.j] - x[e.i]).signum() * (v[e.j] - v[e.i]);
                match self.mode(e) {
                    Mode::On if rate > SURFACE_EPS => consider(rate, e, Mode::Off),
                    Mode::Off if rate < -SURFACE_EPS => consider(-rate, e, Mode::On),
                    _ => {}
                }
            }
            let Some((_, e, next)) = worst else {
                return;
            };
            let prev = self.mode(e);
            self.transition(t, e, prev, next);
            self.rebuild_lists();
        }
    }

    fn transition(&mut self, t: f64, e: Edge, prev: Mode, next: Mode) {
        if prev == next {
            return;
        }
        if prev == Mode::Slide {
            self.push_event(t, EventKind::SlideExit, e);
        }
        match next {
            Mode::On => self.push_event(t, EventKind::EdgeActivate, e),
            Mode::Slide => self.push_event(t, EventKind::SlideEnter, e),
            Mode::Off if prev == Mode::On => self.push_event(t, EventKind::EdgeDeactivate, e),
            Mode::Off => {}
        }
        self.set_mode(e, next);
    }

    fn terminal(&self, x: &[f64]) -> Option<(Terminal, Option<Vec<f64>>)> {
        let (v, _) = self.field(x);
        let conv = self.cfg.conv_tol;
        let state = OpinionState::new(x.to_vec()).ok()?;
        let speed = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if f_residual(&state) < conv && speed < conv {
            return Some((Terminal::Converged, None));
        }
        let lower = 1.0 - self.cfg.boundary_band;
        let mut near_boundary = false;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let d = (x[i] - x[j]).abs();
                let residual = d.min((1.0 - d).max(0.0));
                if residual < conv {
                    continue;
                }
                if d > lower && d <= 1.0 {
                    near_boundary = true;
                } else {
                    return None;
                }
            }
        }
        let decrement: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
        if near_boundary && decrement.abs() < conv {
            Some((Terminal::AsymptoticBoundary, Some(self.boundary_limit(x))))
        } else {
            None
        }
    }

    /// Splits the sorted state at gaps of at least `1 - band` and predicts the
    /// cluster values, linking groups whose gap sits in the boundary band.
    fn boundary_limit(&self, x: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let lower = 1.0 - self.cfg.boundary_band;
        let mut sizes = vec![1usize];
        let mut links = Vec::new();
        for w in order.windows(2) {
            let gap = x[w[1]] - x[w[0]];
            if gap > lower {
                links.push(if gap <= 1.0 + self.cfg.boundary_band {
                    Link::Asymptotic
                } else {
                    Link::Finite
                });
                sizes.push(1);
            } else {
                *sizes.last_mut().expect("nonempty") += 1;
            }
        }
        let state = OpinionState::new(x.to_vec()).expect("finite state");
        let values = predict_limit(&state, &sizes, &links).expect("groups follow the sorted state");
        let mut out = vec![0.0; x.len()];
        let mut k = 0;
        for (size, value) in sizes.iter().zip(values) {
            for &agent in &order[k..k + size] {
                out[agent] = value;
            }
            k += size;
        }
        out
    }

    fn finish(self, terminal: Terminal, predicted_limit: Option<Vec<f64>>) -> Trajectory {
        Trajectory {
            samples: self.samples,
            events: self.events,
            terminal,
            predicted_limit,
        }
    }

    fn run(mut self, mut x: Vec<f64>) -> Result<Trajectory> {
        let tol = self.cfg.event_tol;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let phi = (x[i] - x[j]).abs() - 1.0;
                if phi < -tol {
                    self.set_mode(Edge { i, j }, Mode::On);
                }
            }
        }
        self.rebuild_lists();
        self.co_move(&mut x);
        self.resolve(0.0, &x, &BTreeMap::new())?;

        let mut t = 0.0;
        self.samples.push(Sample { t, x: x.clone() });
        let mut stalled = 0usize;
        let mut repeat_hits: BTreeMap<Edge, usize> = BTreeMap::new();

        loop {
            if let Some((terminal, limit)) = self.terminal(&x) {
                return Ok(self.finish(terminal, limit));
            }
            if t >= self.cfg.t_max {
                return Ok(self.finish(Terminal::TMaxReached, None));
            }
            let h = self.cfg.dt_max.min(self.cfg.t_max - t);
            let x1 = self.step(&x, h);
            let (_, beta1) = self.field(&x1);
            let guards = self.violations(&x1, &beta1);

            if guards.is_empty() {
                x = x1;
                self.co_move(&mut x);
                t = if h == self.cfg.t_max - t { self.cfg.t_max } else { t + h };
                self.samples.push(Sample { t, x: x.clone() });
                self.border.retain(|e| ((x[e.i] - x[e.j]).abs() - 1.0).abs() <= tol);
                stalled = 0;
                repeat_hits.clear();
                continue;
            }

            let seg = StepSegment { engine: &self, x0: &x, t0: t, h };
            let located: Vec<(f64, Guard)> = guards.iter().map(|&g| (self.locate(&seg, g), g)).collect();
            let tau = located.iter().map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            let mut xe = if tau >= h { x1 } else { seg.state_at(t + tau) };
            self.co_move(&mut xe);

            if tau > tol {
                t += tau;
                self.samples.push(Sample { t, x: xe.clone() });
                stalled = 0;
                repeat_hits.clear();
            } else {
                stalled += 1;
                if stalled > MAX_STALLED_EVENTS {
                    let partial = Box::new(Trajectory {
                        samples: self.samples.clone(),
                        events: self.events.clone(),
                        terminal: Terminal::TMaxReached,
                        predicted_limit: None,
                    });
                    return Err(Error::StepUnderflow { time: t, partial });
                }
            }

            let mut forced = BTreeMap::new();
            for &(s, g) in &located {
                if s > tau + tol {
                    continue;
                }
                match g {
                    Guard::SlideExit { edge, face } => {
                        // weight left through 0: even the off field closes the gap
                        let next = if face == 0.0 { Mode::On } else { Mode::Off };
                        forced.insert(edge, next);
                    }
                    Guard::Pair(edge) if tau <= tol => {
                        let hits = repeat_hits.entry(edge).or_insert(0);
                        *hits += 1;
                        if *hits > 1 {
                            let next = if self.mode(edge) == Mode::On { Mode::Off } else { Mode::On };
                            forced.insert(edge, next);
                        }
                    }
                    Guard::Pair(_) => {}
                }
            }
            self.resolve(t, &xe, &forced)?;
            x = xe;
        }
    }
}

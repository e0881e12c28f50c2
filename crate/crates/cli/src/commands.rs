use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hk_core::analysis::{f_residual, is_equilibrium, monitor_invariants, InvariantReport};
use hk_core::integrator::{integrate, SolverConfig, Terminal, Trajectory};
use hk_core::robustness::{boundary_curve, is_robust, region_contains, simulate_perturbation, solve_tstar, threshold, ReducedState};
use hk_core::{Error, OpinionState};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

/// Process exit codes besides success.
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_NEGATIVE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_USAGE, error: error.into() }
    }

    pub fn solver(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_SOLVER, error: error.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::solver(e)
    }
}

pub type Outcome = std::result::Result<i32, Failure>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SimulationReport {
    terminal: Option<Terminal>,
    final_time: f64,
    f_residual: f64,
    clean: bool,
    #[serde(flatten)]
    invariants: InvariantReport,
    predicted_limit: Option<Vec<f64>>,
    error: Option<String>,
}

fn write_run(out: &Path, cfg: &RunConfig, traj: &Trajectory, error: Option<String>) -> Result<bool> {
    let mut w = create(&out.join(&cfg.output.trajectory))?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join(&cfg.output.events))?;
    traj.write_events_jsonl(&mut w)?;
    w.flush()?;
    let invariants = monitor_invariants(traj);
    let clean = invariants.is_clean();
    let report = SimulationReport {
        terminal: error.is_none().then_some(traj.terminal),
        final_time: traj.final_time(),
        f_residual: f_residual(&traj.final_state()),
        clean,
        invariants,
        predicted_limit: traj.predicted_limit.clone(),
        error,
    };
    write_json(&out.join(&cfg.output.report), &report)?;
    Ok(clean)
}

pub fn simulate(cfg: &RunConfig, solver: &SolverConfig, out: &Path) -> Outcome {
    let x0 = cfg.initial_state().map_err(Failure::usage)?;
    fs::create_dir_all(out)?;
    match integrate(&x0, solver) {
        Ok(traj) => {
            let clean = write_run(out, cfg, &traj, None).map_err(Failure::solver)?;
            eprintln!(
                "terminal {:?} at t = {} after {} events, invariants {}",
                traj.terminal,
                traj.final_time(),
                traj.events.len(),
                if clean { "clean" } else { "violated" }
            );
            Ok(if clean { 0 } else { EXIT_INVARIANT })
        }
        Err(Error::StepUnderflow { time, partial }) => {
            let msg = format!("step underflow at t = {time}");
            write_run(out, cfg, &partial, Some(msg.clone())).map_err(Failure::solver)?;
            Err(Failure::solver(anyhow::anyhow!(msg)))
        }
        Err(e) => Err(Failure::solver(e)),
    }
}

/// Expands `size@value` cluster specs into a state.
pub fn state_from_clusters(specs: &[String]) -> Result<OpinionState> {
    let mut v = Vec::new();
    for s in specs {
        let Some((size, value)) = s.split_once('@') else {
            bail!("cluster spec {s:?} is not of the form size@value");
        };
        let size: usize = size.trim().parse().with_context(|| format!("cluster size in {s:?}"))?;
        let value: f64 = value.trim().parse().with_context(|| format!("cluster value in {s:?}"))?;
        if size == 0 {
            bail!("cluster spec {s:?} has size zero");
        }
        v.extend(std::iter::repeat_n(value, size));
    }
    Ok(OpinionState::new(v)?)
}

pub fn robustness(x: &OpinionState, tol: f64, out: &Path) -> Outcome {
    match is_robust(x, tol) {
        Ok(report) => {
            fs::create_dir_all(out)?;
            write_json(&out.join("robustness.json"), &report).map_err(Failure::solver)?;
            println!("{}", serde_json::to_string(&report).map_err(Failure::solver)?);
            Ok(if report.overall { 0 } else { EXIT_NEGATIVE })
        }
        Err(Error::NotEquilibrium { residual }) => Err(Failure::solver(anyhow::anyhow!(
            "input is not an equilibrium: residual {residual:e} exceeds tolerance {tol:e}"
        ))),
        Err(e) => Err(Failure::usage(e)),
    }
}

#[derive(Serialize)]
struct EquilibriumCheck {
    residual: f64,
    equilibrium: bool,
    strong: bool,
}

pub fn check_equilibrium(x: &OpinionState, tol: f64, strong: bool) -> Outcome {
    let check = EquilibriumCheck {
        residual: f_residual(x),
        equilibrium: is_equilibrium(x, tol, false),
        strong: is_equilibrium(x, tol, true),
    };
    println!("{}", serde_json::to_string(&check).map_err(Failure::solver)?);
    let ok = if strong { check.strong } else { check.equilibrium };
    Ok(if ok { 0 } else { EXIT_NEGATIVE })
}

pub struct VerifySpec {
    pub n_a: usize,
    pub n_b: usize,
    pub gaps: Vec<f64>,
    pub grid_step: f64,
    pub budget: usize,
}

/// Placements per gap: the two unit-distance spots and the interior grid,
/// thinned evenly so the whole table fits in `budget` cells.
fn verify_cells(spec: &VerifySpec) -> Vec<(f64, f64)> {
    let per_gap: Vec<Vec<f64>> = spec
        .gaps
        .iter()
        .map(|&gap| {
            let steps = (gap / spec.grid_step).ceil() as usize;
            let mut xs: Vec<f64> = (1..steps).map(|k| k as f64 * spec.grid_step).collect();
            xs.extend([1.0, gap - 1.0]);
            xs.retain(|&x| x > 0.0 && x < gap);
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            xs
        })
        .collect();
    let mut quota = vec![0usize; per_gap.len()];
    let mut left = spec.budget;
    // round-robin so every gap gets cells before any gets many
    while left > 0 && quota.iter().zip(&per_gap).any(|(q, xs)| *q < xs.len()) {
        for (q, xs) in quota.iter_mut().zip(&per_gap) {
            if left > 0 && *q < xs.len() {
                *q += 1;
                left -= 1;
            }
        }
    }
    let mut cells = Vec::new();
    for ((&gap, xs), q) in spec.gaps.iter().zip(&per_gap).zip(quota) {
        if q == 0 {
            continue;
        }
        if q == xs.len() {
            cells.extend(xs.iter().map(|&x| (gap, x)));
        } else {
            cells.extend((0..q).map(|k| (gap, xs[k * xs.len() / q])));
        }
    }
    cells
}

pub fn verify(spec: &VerifySpec, solver: &SolverConfig, out: &Path) -> Outcome {
    if spec.gaps.iter().any(|g| !(g.is_finite() && *g >= 1.0)) {
        return Err(Failure::usage(anyhow::anyhow!("gaps must be finite and at least 1")));
    }
    if !(spec.grid_step > 0.0 && spec.grid_step.is_finite()) {
        return Err(Failure::usage(anyhow::anyhow!("grid step must be positive")));
    }
    let d = threshold(spec.n_a, spec.n_b).map_err(Failure::usage)?;
    let cells = verify_cells(spec);
    let merged: Vec<Result<bool, String>> = cells
        .par_iter()
        .map(|&(gap, x0)| simulate_perturbation(0.0, gap, spec.n_a, spec.n_b, x0, solver).map_err(|e| e.to_string()))
        .collect();

    fs::create_dir_all(out)?;
    let mut w = create(&out.join("verify.csv")).map_err(Failure::solver)?;
    writeln!(w, "gap,x0,merged")?;
    for (&(gap, x0), m) in cells.iter().zip(&merged) {
        let flag = match m {
            Ok(true) => "true".to_string(),
            Ok(false) => "false".to_string(),
            Err(e) => format!("error: {}", e.replace(',', ";")),
        };
        writeln!(w, "{gap:.16e},{x0:.16e},{flag}")?;
    }

    let summary = if cells.is_empty() {
        "no data".to_string()
    } else {
        let mut gaps: Vec<(f64, bool)> = Vec::new();
        for (&(gap, _), m) in cells.iter().zip(&merged) {
            let hit = matches!(m, Ok(true));
            match gaps.iter_mut().find(|(g, _)| *g == gap) {
                Some(entry) => entry.1 |= hit,
                None => gaps.push((gap, hit)),
            }
        }
        let highest_merge = gaps.iter().filter(|g| g.1).map(|g| g.0).fold(f64::NAN, f64::max);
        let lowest_stable = gaps.iter().filter(|g| !g.1).map(|g| g.0).fold(f64::NAN, f64::min);
        let band = 1e-2;
        let agrees = gaps.iter().all(|&(g, hit)| (g - d).abs() <= band || hit == (g <= d));
        format!(
            "nA={} nB={} threshold={d:.16e} highest_merging_gap={} lowest_stable_gap={} agrees={agrees}",
            spec.n_a.min(spec.n_b),
            spec.n_a.max(spec.n_b),
            display_opt(highest_merge),
            display_opt(lowest_stable),
        )
    };
    writeln!(w, "# summary: {summary}")?;
    w.flush()?;
    eprintln!("{summary}");
    Ok(0)
}

fn display_opt(v: f64) -> String {
    if v.is_nan() {
        "none".into()
    } else {
        format!("{v}")
    }
}

pub fn region(n_a: usize, n_b: usize, resolution: usize, out: &Path) -> Outcome {
    if resolution < 2 {
        return Err(Failure::usage(anyhow::anyhow!("resolution must be at least 2")));
    }
    if n_a == 0 || n_b == 0 {
        return Err(Failure::usage(anyhow::anyhow!("cluster sizes must be positive")));
    }
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("region_grid.csv")).map_err(Failure::solver)?;
    writeln!(w, "x,y,inside")?;
    let at = |k: usize| 1.2 * k as f64 / (resolution - 1) as f64;
    for i in 0..resolution {
        for j in 0..resolution {
            let (x, y) = (at(i), at(j));
            let inside = region_contains(ReducedState::new(x, y), n_a, n_b);
            writeln!(w, "{x:.16e},{y:.16e},{inside}")?;
        }
    }
    w.flush()?;

    let (a, b) = (n_a.min(n_b), n_a.max(n_b));
    let mut w = create(&out.join("region_curve.csv")).map_err(Failure::solver)?;
    writeln!(w, "t,x,y")?;
    if a < b {
        let tstar = solve_tstar(a, b).map_err(Failure::solver)?;
        let points = if tstar == 0.0 { 1 } else { resolution };
        for k in 0..points {
            let t = if points == 1 { 0.0 } else { tstar * (1.0 - k as f64 / (points - 1) as f64) + 0.0 };
            let (x, y) = boundary_curve(a, b, t).map_err(Failure::solver)?;
            // the curve is drawn in the caller's orientation
            let (x, y) = if n_a <= n_b { (x, y) } else { (y, x) };
            writeln!(w, "{t:.16e},{x:.16e},{y:.16e}")?;
        }
    }
    w.flush()?;
    Ok(0)
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use hk_core::analysis::{f_residual, monitor_invariants};
use hk_core::dynamics::{hull_vertices, in_hull, sliding_weights, vector_field, EdgeWeights, SurfaceClass};
use hk_core::graph::{build_graph, DEFAULT_BORDER_TOL};
use hk_core::integrator::{integrate, Policy, SolverConfig, Terminal, Trajectory};
use hk_core::robustness::{
    find_merge_witness, reduced_field, region_contains, solve_tstar, threshold, ReducedState, WITNESS_GRID_STEP,
};
use hk_core::{Edge, OpinionState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn state(v: &[f64]) -> OpinionState {
    OpinionState::new(v.to_vec()).unwrap()
}

fn closed_form_trajectory() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig::default().with_policy(Policy::Sliding).with_t_max(5.0);
    let traj = integrate(&state(&[1.0, 0.0]), &cfg).unwrap();
    let elapsed = start.elapsed();
    let err = traj
        .samples
        .iter()
        .map(|s| {
            let e = (-2.0 * s.t).exp();
            (s.x[0] - (0.5 + 0.5 * e)).abs().max((s.x[1] - (0.5 - 0.5 * e)).abs())
        })
        .fold(0.0, f64::max);
    let reached_end = (traj.final_time() - 5.0).abs() < 1e-12 || traj.terminal == Terminal::Converged;
    outcome(
        err <= 1e-6 && reached_end && elapsed < Duration::from_secs(1),
        format!("max error {err:.3e}, runtime {elapsed:.2?}"),
    )
}

fn sliding_weight() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let edge = Edge::new(1, 2);
    let (mut worst_beta, mut worst_rate) = (0.0f64, 0.0f64);
    let mut all_sliding = true;
    for _ in 0..100 {
        let c: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let x = state(&[0.0, c, c + 1.0]);
        let verdict = sliding_weights(&x, &[edge]).unwrap();
        let SurfaceClass::Sliding { beta } = verdict[0].class else {
            all_sliding = false;
            continue;
        };
        worst_beta = worst_beta.max((beta - c / 2.0).abs());
        let v = vector_field(&x, &EdgeWeights::from_pairs([(edge, beta)]).unwrap()).unwrap();
        worst_rate = worst_rate.max((v[2] - v[1]).abs());
    }
    outcome(
        all_sliding && worst_beta <= 1e-12 && worst_rate <= 1e-12,
        format!("max |beta - c/2| {worst_beta:.3e}, max normal rate {worst_rate:.3e}"),
    )
}

fn random_runs() -> Vec<(usize, Policy, OpinionState, Trajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states: Vec<OpinionState> = (0..200)
        .map(|_| {
            let n = rng.gen_range(3..=20);
            state(&(0..n).map(|_| rng.gen_range(0.0..10.0)).collect::<Vec<_>>())
        })
        .collect();
    let jobs: Vec<(usize, Policy)> = (0..states.len())
        .flat_map(|k| [Policy::Proper, Policy::Sliding, Policy::Sampled { seed: k as u64 }].map(|p| (k, p)))
        .collect();
    jobs.into_par_iter()
        .map(|(k, policy)| {
            let cfg = SolverConfig::default().with_policy(policy);
            let traj = integrate(&states[k], &cfg).unwrap_or_else(|e| panic!("state {k} under {policy:?}: {e}"));
            (k, policy, states[k].clone(), traj)
        })
        .collect()
}

fn invariant_suite(runs: &[(usize, Policy, OpinionState, Trajectory)], elapsed: Duration) -> Outcome {
    let dirty: Vec<String> = runs
        .par_iter()
        .filter_map(|(k, p, _, traj)| {
            let r = monitor_invariants(traj);
            (!r.is_clean()).then(|| format!("state {k} {p:?}: {r:?}"))
        })
        .collect();
    let detail = match dirty.first() {
        Some(d) => format!("{} dirty runs, first {d}", dirty.len()),
        None => format!("{} runs clean, runtime {elapsed:.2?}", runs.len()),
    };
    outcome(dirty.is_empty() && elapsed < Duration::from_secs(120), detail)
}

fn convergence(runs: &[(usize, Policy, OpinionState, Trajectory)]) -> Outcome {
    let bad: Vec<String> = runs
        .iter()
        .filter_map(|(k, p, _, traj)| {
            let residual = f_residual(&traj.final_state());
            let ok = match traj.terminal {
                Terminal::Converged => residual < 1e-3,
                Terminal::AsymptoticBoundary => true,
                Terminal::TMaxReached => false,
            };
            (!ok).then(|| format!("state {k} {p:?}: {:?}, residual {residual:.3e}", traj.terminal))
        })
        .collect();
    let boundary = runs
        .iter()
        .filter(|r| r.3.terminal == Terminal::AsymptoticBoundary)
        .count();

    let traj = integrate(&state(&[0.0, 0.6, 2.0, 2.6]), &SolverConfig::default()).unwrap();
    let xf = traj.final_state();
    let err = xf
        .values()
        .iter()
        .zip([0.3, 0.3, 2.3, 2.3])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let detail = match bad.first() {
        Some(b) => format!("{} unconverged, first {b}", bad.len()),
        None => format!("all converged ({boundary} asymptotic), disconnection error {err:.3e}"),
    };
    outcome(bad.is_empty() && err <= 1e-6, detail)
}

/// Random state on a quarter grid, so unit gaps are exact, with one to four
/// border pairs.
fn border_state(rng: &mut ChaCha8Rng) -> OpinionState {
    loop {
        let n = rng.gen_range(2..=5);
        let x = state(&(0..n).map(|_| rng.gen_range(0..=12) as f64 * 0.25).collect::<Vec<_>>());
        let b = build_graph(&x, DEFAULT_BORDER_TOL).unwrap().border_edges().len();
        if (1..=4).contains(&b) {
            return x;
        }
    }
}

fn hull_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vertex_mismatches = 0;
    let mut interior_failures = 0;
    let mut worst_combination = 0.0f64;
    for _ in 0..500 {
        let x = border_state(&mut rng);
        let border: Vec<Edge> = build_graph(&x, DEFAULT_BORDER_TOL)
            .unwrap()
            .border_edges()
            .iter()
            .copied()
            .collect();
        let vertices = hull_vertices(&x).unwrap();
        for (mask, vertex) in vertices.iter().enumerate() {
            let beta = EdgeWeights::from_pairs(
                border.iter().enumerate().map(|(k, &e)| (e, (mask >> k & 1) as f64)),
            )
            .unwrap();
            if &vector_field(&x, &beta).unwrap() != vertex {
                vertex_mismatches += 1;
            }
        }
        for _ in 0..50 {
            let b: Vec<f64> = border.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            let v = vector_field(&x, &EdgeWeights::from_pairs(border.iter().copied().zip(b.iter().copied())).unwrap())
                .unwrap();
            // explicit convex combination of the enumerated vertices
            let mut combo = vec![0.0; x.len()];
            for (mask, vertex) in vertices.iter().enumerate() {
                let alpha: f64 = b
                    .iter()
                    .enumerate()
                    .map(|(k, bk)| if mask >> k & 1 == 1 { *bk } else { 1.0 - bk })
                    .product();
                for (c, w) in combo.iter_mut().zip(vertex) {
                    *c += alpha * w;
                }
            }
            let gap = combo.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_combination = worst_combination.max(gap);
            if gap > 1e-12 || !in_hull(&x, &v).unwrap() {
                interior_failures += 1;
            }
        }
    }
    outcome(
        vertex_mismatches == 0 && interior_failures == 0,
        format!(
            "{vertex_mismatches} vertex mismatches, {interior_failures} interior failures, max combination gap {worst_combination:.3e}"
        ),
    )
}

fn tstar_residual(a: usize, b: usize, t: f64) -> f64 {
    let n = (a + b) as f64;
    (-(n + 1.0) * t).exp() / n + a as f64 / b as f64 * (1.0 + 1.0 / n) * (-t).exp() - 1.0
}

fn tstar_solver() -> Outcome {
    let mut worst_residual = 0.0f64;
    let mut bound_violations = 0;
    for b in 2..=200 {
        for a in 1..b {
            let t = solve_tstar(a, b).unwrap();
            worst_residual = worst_residual.max(tstar_residual(a, b, t).abs());
            let n = (a + b) as f64;
            if t > 0.0 || -t > n.ln() / (n + 1.0) {
                bound_violations += 1;
            }
        }
    }
    let t12 = solve_tstar(1, 2).unwrap();
    outcome(
        worst_residual <= 1e-12 && bound_violations == 0 && t12.abs() <= 1e-12,
        format!("max residual {worst_residual:.3e}, {bound_violations} bound violations, t*(1,2) = {t12}"),
    )
}

/// Root `s = e^{-t*}` of `(1/n) s^{n+1} + (a/b)(1 + 1/n) s = 1` by bisection
/// on `[1, 2]`.
fn threshold_oracle(a: usize, b: usize) -> f64 {
    let n = (a + b) as f64;
    let g = |s: f64| s.powf(n + 1.0) / n + a as f64 / b as f64 * (1.0 + 1.0 / n) * s - 1.0;
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (1.0 + a as f64 / b as f64) * (1.0 + 1.0 / n) * 0.5 * (lo + hi)
}

fn threshold_values() -> Outcome {
    let equal = (1..=50).all(|n| threshold(n, n).unwrap() == 2.0);
    let d12 = threshold(1, 2).unwrap();
    let d13 = threshold(1, 3).unwrap();
    let oracle = threshold_oracle(1, 3);
    // 40-digit reference value
    let reference = 1.928_073_623_632_984_5;
    outcome(
        equal && (d12 - 2.0).abs() <= 1e-12 && (d13 - oracle).abs() <= 1e-10 && (d13 - reference).abs() <= 1e-10,
        format!("threshold(1,3) = {d13:.15}, oracle {oracle:.15}, threshold(1,2) = {d12}"),
    )
}

fn merge_cross_validation() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig::default();
    let mut cases = Vec::new();
    for (a, b) in [(1, 2), (1, 3), (2, 3), (2, 5), (3, 3)] {
        let d = threshold(a, b).unwrap();
        for offset in [-0.10, -0.05, 0.05, 0.10] {
            cases.push((a, b, d, d + offset));
        }
    }
    let wrong: Vec<String> = cases
        .par_iter()
        .filter_map(|&(a, b, d, gap)| {
            let witness = find_merge_witness(a, b, gap, WITNESS_GRID_STEP, &cfg).unwrap();
            let expect = gap <= d;
            let inside_band = (gap - d).abs() <= 1e-2;
            (witness.is_some() != expect && !inside_band)
                .then(|| format!("({a},{b}) gap {gap:.3} witness {witness:?}"))
        })
        .collect();
    let elapsed = start.elapsed();
    outcome(
        wrong.is_empty() && elapsed < Duration::from_secs(300),
        format!("{} cases, {} misclassified {:?}, runtime {elapsed:.2?}", cases.len(), wrong.len(), wrong),
    )
}

fn large_population_limit() -> Outcome {
    let excess: Vec<f64> = (0..=7).map(|k| threshold(1 << k, 2 << k).unwrap() - 1.5).collect();
    let positive = excess.iter().all(|e| *e > 0.0);
    let decreasing = excess.windows(2).all(|w| w[1] < w[0]);
    let last = *excess.last().unwrap();
    outcome(
        positive && decreasing && last < 0.02,
        format!("positive {positive}, decreasing {decreasing}, excess at nA = 128 is {last:.6} (required < 0.02)"),
    )
}

fn reduced_rk4(s: ReducedState, h: f64) -> ReducedState {
    let f = |p: ReducedState| reduced_field(p, 1, 3);
    let shift = |p: ReducedState, k: (f64, f64), c: f64| ReducedState::new(p.x + c * k.0, p.y + c * k.1);
    let k1 = f(s);
    let k2 = f(shift(s, k1, 0.5 * h));
    let k3 = f(shift(s, k2, 0.5 * h));
    let k4 = f(shift(s, k3, h));
    ReducedState::new(
        s.x + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        s.y + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

fn region_of_attraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    while inside.len() < 1000 || outside.len() < 1000 {
        let s = ReducedState::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        if s.x <= 0.0 || s.y <= 0.0 {
            continue;
        }
        if region_contains(s, 1, 3) {
            if inside.len() < 1000 {
                inside.push(s);
            }
        } else if outside.len() < 1000 {
            outside.push(s);
        }
    }
    let h = 1e-2;
    let steps = (50.0 / h) as usize;
    let failed_in = inside
        .par_iter()
        .filter(|&&s| {
            let mut p = s;
            for _ in 0..steps {
                p = reduced_rk4(p, h);
            }
            p.x.hypot(p.y) >= 1e-4
        })
        .count();
    let failed_out = outside
        .par_iter()
        .filter(|&&s| {
            let mut p = s;
            for _ in 0..steps {
                if p.x > 1.0 {
                    return false;
                }
                p = reduced_rk4(p, h);
            }
            p.x <= 1.0
        })
        .count();
    outcome(
        failed_in == 0 && failed_out == 0,
        format!("{failed_in} inside points failed to converge, {failed_out} outside points failed to exit"),
    )
}

fn main() {
    let start = Instant::now();
    let runs = random_runs();
    let runs_elapsed = start.elapsed();

    let results = [
        ("closed-form two-agent trajectory", closed_form_trajectory()),
        ("sliding weight on a single surface", sliding_weight()),
        ("invariant suite on random states", invariant_suite(&runs, runs_elapsed)),
        ("convergence to the equilibrium set", convergence(&runs)),
        ("hull vertex and membership equivalence", hull_equivalence()),
        ("t* solver residual and bracket", tstar_solver()),
        ("threshold values", threshold_values()),
        ("merge witness versus threshold", merge_cross_validation()),
        ("large-population limit", large_population_limit()),
        ("region of attraction", region_of_attraction()),
    ];
    let mut failures = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {} {name}: {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failures, results.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

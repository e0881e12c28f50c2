//! `hksim`: simulate bounded-confidence opinion dynamics and check cluster robustness.
//!
//! Exit codes: 0 success, 1 solver or input-state error, 2 invariant
//! violation during `simulate`, 3 negative verdict (`robustness`,
//! `check-equilibrium`), 64 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hk_core::OpinionState;

use commands::{Failure, Outcome, VerifySpec};
use config::{PolicyName, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "hksim", version, about = "Bounded-confidence opinion dynamics under Krasovskii semantics")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "HKSIM_CONFIG")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "HKSIM_OUT", default_value = ".")]
    out: PathBuf,

    /// Seed of the sampled continuation policy.
    #[arg(long, global = true, env = "HKSIM_SEED")]
    seed: Option<u64>,

    /// Continuation policy at branching surfaces.
    #[arg(long, global = true, env = "HKSIM_POLICY", value_enum)]
    policy: Option<PolicyName>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a configured initial state and write trajectory, events and report.
    Simulate,
    /// Robustness verdicts for the adjacent clusters of an equilibrium.
    Robustness(StateArgs),
    /// Sweep perturbation placements for two clusters over a list of gaps.
    Verify {
        /// Cluster sizes as `a,b`.
        #[arg(long, value_parser = parse_sizes)]
        sizes: (usize, usize),
        #[arg(long, value_delimiter = ',', required = true)]
        gaps: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        grid_step: f64,
        /// Maximum number of simulated placements.
        #[arg(long, default_value_t = usize::MAX)]
        budget: usize,
    },
    /// Tabulate the merging region of two clusters and its boundary curve.
    Region {
        #[arg(long, value_parser = parse_sizes)]
        sizes: (usize, usize),
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Decide whether a state is a (strong) equilibrium.
    CheckEquilibrium {
        #[command(flatten)]
        input: StateArgs,
        #[arg(long)]
        strong: bool,
    },
}

#[derive(Args, Debug)]
struct StateArgs {
    /// Opinions, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "clusters")]
    state: Option<Vec<f64>>,
    /// Clusters as `size@value`, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    clusters: Option<Vec<String>>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

impl StateArgs {
    fn state(&self) -> Result<OpinionState, Failure> {
        match (&self.state, &self.clusters) {
            (Some(v), None) => OpinionState::new(v.clone()).map_err(Failure::usage),
            (None, Some(c)) => commands::state_from_clusters(c).map_err(Failure::usage),
            _ => Err(Failure::usage(anyhow::anyhow!("one of --state or --clusters is required"))),
        }
    }
}

fn parse_sizes(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two sizes as a,b")?;
    let size = |t: &str| match t.trim().parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("{t:?} is not a positive cluster size")),
        Ok(n) => Ok(n),
    };
    Ok((size(a)?, size(b)?))
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, Failure> {
    cli.config.as_deref().map(RunConfig::load).transpose().map_err(Failure::usage)
}

fn solver_for(cli: &Cli, cfg: Option<&RunConfig>) -> Result<hk_core::integrator::SolverConfig, Failure> {
    let name = cli.policy.or(cfg.and_then(|c| c.policy)).unwrap_or(PolicyName::Proper);
    let seed = cli.seed.or(cfg.and_then(|c| c.seed)).unwrap_or(0);
    let policy = name.with_seed(seed);
    match cfg {
        Some(c) => c.solver(policy).map_err(Failure::usage),
        None => Ok(hk_core::integrator::SolverConfig::default().with_policy(policy)),
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Simulate => {
            let Some(cfg) = load_config(cli)? else {
                return Err(Failure::usage(anyhow::anyhow!("simulate needs --config")));
            };
            let solver = solver_for(cli, Some(&cfg))?;
            commands::simulate(&cfg, &solver, &cli.out)
        }
        Command::Robustness(input) => commands::robustness(&input.state()?, input.tol, &cli.out),
        Command::CheckEquilibrium { input, strong } => commands::check_equilibrium(&input.state()?, input.tol, *strong),
        Command::Verify { sizes, gaps, grid_step, budget } => {
            let cfg = load_config(cli)?;
            let solver = solver_for(cli, cfg.as_ref())?;
            let spec = VerifySpec {
                n_a: sizes.0,
                n_b: sizes.1,
                gaps: gaps.clone(),
                grid_step: *grid_step,
                budget: *budget,
            };
            commands::verify(&spec, &solver, &cli.out)
        }
        Command::Region { sizes, resolution } => commands::region(sizes.0, sizes.1, *resolution, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}

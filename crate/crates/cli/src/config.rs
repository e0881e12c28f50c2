//! TOML run configuration.
//!
//! ```toml
//! policy = "sliding"          # proper | sliding | sampled
//! seed = 3                    # generator seed of the sampled policy
//! initial = [1.0, 0.0]        # or a [random] table, not both
//!
//! [random]
//! n = 20
//! seed = 7
//! low = 0.0
//! high = 10.0
//!
//! [solver]                    # every key optional
//! dt_max = 0.01
//! event_tol = 1e-9
//! conv_tol = 1e-8
//! t_max = 200.0
//! boundary_band = 1e-3
//!
//! [output]                    # file names inside --out
//! trajectory = "trajectory.csv"
//! events = "events.jsonl"
//! report = "report.json"
//! ```
//!
//! Unknown keys are rejected.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use hk_core::integrator::{Policy, SolverConfig};
use hk_core::OpinionState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Proper,
    Sliding,
    Sampled,
}

impl PolicyName {
    pub fn with_seed(self, seed: u64) -> Policy {
        match self {
            PolicyName::Proper => Policy::Proper,
            PolicyName::Sliding => Policy::Sliding,
            PolicyName::Sampled => Policy::Sampled { seed },
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: Option<usize>,
    pub initial: Option<Vec<f64>>,
    pub random: Option<RandomInit>,
    pub policy: Option<PolicyName>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInit {
    pub n: Option<usize>,
    pub seed: u64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dt_max: Option<f64>,
    pub event_tol: Option<f64>,
    pub conv_tol: Option<f64>,
    pub t_max: Option<f64>,
    pub boundary_band: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub trajectory: String,
    pub events: String,
    pub report: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            trajectory: "trajectory.csv".into(),
            events: "events.jsonl".into(),
            report: "report.json".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                anyhow!("{}", inner.message())
            } else {
                anyhow!("{path}: {}", inner.message())
            }
        })
    }

    pub fn initial_state(&self) -> Result<OpinionState> {
        let values = match (&self.initial, &self.random) {
            (Some(_), Some(_)) => bail!("initial and random are mutually exclusive"),
            (None, None) => bail!("one of initial or random is required"),
            (Some(v), None) => v.clone(),
            (None, Some(r)) => {
                let n = match (r.n, self.n) {
                    (Some(a), Some(b)) if a != b => bail!("random.n = {a} disagrees with n = {b}"),
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => bail!("random: n is required"),
                };
                if !(r.low.is_finite() && r.high.is_finite() && r.low < r.high) {
                    bail!("random: need finite low < high, got [{}, {}]", r.low, r.high);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
                (0..n).map(|_| rng.gen_range(r.low..r.high)).collect()
            }
        };
        if let Some(n) = self.n {
            if n != values.len() {
                bail!("n = {n} but initial has {} entries", values.len());
            }
        }
        OpinionState::new(values).map_err(|e| anyhow!("initial: {e}"))
    }

    pub fn solver(&self, policy: Policy) -> Result<SolverConfig> {
        let d = SolverConfig::default();
        let s = &self.solver;
        let cfg = SolverConfig {
            dt_max: s.dt_max.unwrap_or(d.dt_max),
            event_tol: s.event_tol.unwrap_or(d.event_tol),
            conv_tol: s.conv_tol.unwrap_or(d.conv_tol),
            t_max: s.t_max.unwrap_or(d.t_max),
            boundary_band: s.boundary_band.unwrap_or(d.boundary_band),
            policy,
        };
        cfg.validate().map_err(|e| anyhow!("solver: {e}"))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_and_random_initial_states() {
        let c = RunConfig::parse("initial = [1.0, 0.0]\npolicy = \"sliding\"").unwrap();
        assert_eq!(c.initial_state().unwrap().values(), &[1.0, 0.0]);
        assert_eq!(c.policy, Some(PolicyName::Sliding));

        let text = "[random]\nn = 20\nseed = 7\nlow = 0.0\nhigh = 10.0\n";
        let a = RunConfig::parse(text).unwrap().initial_state().unwrap();
        let b = RunConfig::parse(text).unwrap().initial_state().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.values().iter().all(|v| (0.0..10.0).contains(v)));
    }

    #[test]
    fn errors_name_the_offending_field() {
        let err = RunConfig::parse("initial = [0.0]\n[solver]\ndt_maxx = 1.0").unwrap_err();
        assert!(err.to_string().contains("solver"), "{err}");
        let err = RunConfig::parse("initial = [0.0]\n[solver]\nt_max = \"long\"").unwrap_err();
        assert!(err.to_string().contains("solver.t_max"), "{err}");
        let c = RunConfig::parse("initial = [0.0]\n[random]\nseed = 1\nlow = 0.0\nhigh = 1.0\nn = 2").unwrap();
        assert!(c.initial_state().is_err());
        assert!(RunConfig::parse("n = 3\ninitial = [0.0]").unwrap().initial_state().is_err());
        let c = RunConfig::parse("initial = [0.0]\n[solver]\ndt_max = -1.0").unwrap();
        assert!(c.solver(Policy::Proper).is_err());
    }
}

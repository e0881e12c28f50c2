//! Continuous-time Hegselmann–Krause opinion dynamics with bounded confidence,
//! simulated and analysed under Krasovskii solution semantics.
//!
//! Agents hold real opinions and are attracted to every other agent closer
//! than one unit. The right-hand side is discontinuous on the surfaces
//! `|x_i - x_j| = 1`; this crate convexifies the field there, integrates
//! trajectories across (and along) those surfaces, and analyses the cluster
//! equilibria the dynamics converge to, including their robustness to a
//! single perturbing agent.
//!
//! Module map:
//!
//! * [`graph`]: state-dependent interaction graphs and Laplacians.
//! * [`dynamics`]: vector field, Krasovskii hull, surface classification.
//! * [`integrator`]: event-driven integration under a continuation policy.
//! * [`analysis`]: equilibria, clusters, limit prediction, invariant monitors.
//! * [`robustness`]: cluster-merging thresholds and their verification.

pub mod analysis;
pub mod dynamics;
mod error;
pub mod graph;
pub mod integrator;
pub mod robustness;

pub use error::{Error, Result};
pub use graph::{Edge, InteractionGraph, OpinionState};

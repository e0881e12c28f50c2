use crate::graph::Edge;
use crate::integrator::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("edge weight for {edge} does not match a border edge of the graph")]
    WeightMismatch { edge: Edge },

    #[error("edge weight {weight} for {edge} is outside [0, 1]")]
    WeightOutOfRange { edge: Edge, weight: f64 },

    #[error("{count} border edges exceed the enumeration cap of {cap}")]
    HullCapExceeded { count: usize, cap: usize },

    #[error("degenerate discontinuity surface: {0}")]
    DegenerateSurface(String),

    #[error("no threshold crossing for {edge} on [{start}, {end}]")]
    NoEvent { edge: Edge, start: f64, end: f64 },

    #[error("event cluster denser than the event tolerance at t = {time}")]
    StepUnderflow { time: f64, partial: Box<Trajectory> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state is not an equilibrium (F-residual {residual:e})")]
    NotEquilibrium { residual: f64 },

    #[error("inconsistent group specification: {0}")]
    InconsistentGroups(String),
}

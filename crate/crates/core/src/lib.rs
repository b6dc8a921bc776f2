//! Adaptive polytopic LPV MPC for solar-thermal collector temperature regulation.
//!
//! The crate provides:
//!
//! - a high-fidelity nonlinear collector model and fixed-step RK4 simulator ([`plant`]),
//! - the polytopic LPV embedding of that model (scheduling map, vertex models,
//!   membership weights) ([`lpv`]),
//! - a dense convex QP solver with an active-set method and KKT verification ([`qp`]),
//! - halfspace polytope algebra and invariant-set computations ([`polytope`]),
//! - a backward moving-horizon membership estimator ([`mhe`]),
//! - a forward tracking MPC with artificial reference and terminal ingredients
//!   ([`tracking`]),
//! - a robust tube-based MPC comparator ([`tube`]),
//! - and a batch closed-loop scenario harness with IAE/TV metrics ([`scenario`]).
//!
//! Controllers run at a 3 s sampling period against the nonlinear truth model and are
//! compared head-to-head on tracking, rejection and control-effort metrics.

pub mod lpv;
pub mod mhe;
pub mod plant;
pub mod polytope;
pub mod qp;
pub mod scenario;
pub mod synthesis;
pub mod textmat;
pub mod tracking;
pub mod tube;

pub use lpv::{LpvMatrices, MembershipWeights, PolytopeVertices, SchedulingBounds, SchedulingPoint};
pub use plant::{Exogenous, PlantParams, PlantState};
pub use polytope::HPolytope;
pub use qp::{QpProblem, QpSolution, QpSolver, QpStatus};
pub use scenario::{ControllerKind, MetricsReport, ScenarioConfig};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scheduling point outside P: {0}")]
    Scheduling(String),
    #[error("invalid membership weights: {0}")]
    Weights(String),
    #[error("qp problem definition: {0}")]
    QpDefinition(String),
    #[error("integration blow-up: {0}")]
    Integration(String),
    #[error("polytope operation: {0}")]
    Polytope(String),
    #[error("synthesis failure: {0}")]
    Synthesis(String),
    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

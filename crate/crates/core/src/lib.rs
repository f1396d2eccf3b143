//! Topology-driven model predictive control for navigating among pedestrians.
//!
//! The crate is organized around one planning cycle:
//!
//! 1. [`prediction`] propagates each obstacle's state and Gaussian
//!    uncertainty over the horizon with a constant-velocity model.
//! 2. [`guidance`] runs a space-time visibility PRM and returns a handful of
//!    coarse trajectories that each pass the obstacles differently
//!    (classified by [`topology`] winding numbers).
//! 3. [`trajopt`] locally optimizes every guidance trajectory (plus one
//!    non-guided fallback) under linearized Gaussian collision chance
//!    constraints, using the SQP machinery in [`ocp`] and the dense QP
//!    solver in [`qp`].
//! 4. [`tmpc`] coordinates the parallel planners and selects the lowest-cost
//!    feasible trajectory with a consistency preference.
//! 5. [`tracking`] follows the selected trajectory with a contouring
//!    controller over a nonlinear single-track model with Fiala tires.
//! 6. [`sim`] closes the loop: pedestrian scenarios, plant integration,
//!    collision bookkeeping, baselines, and per-episode metrics.



pub mod guidance;
pub mod ocp;
pub mod path;
pub mod qp;
pub mod prediction;



pub mod sim;
pub mod spline;
pub mod stats;
pub mod tmpc;
pub mod topology;
pub mod tracking;
pub mod trajopt;





/// Errors shared across the planning stack.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Inputs violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Geometry degenerate enough that the requested quantity is undefined
    /// (e.g. coincident ego/obstacle positions in a winding computation).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    /// A constraint linearization point coincides with the obstacle mean.
    #[error("degenerate linearization: trajectory point coincides with obstacle mean")]
    DegenerateLinearization,
    /// Structured log could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Planar vector/point type used throughout the crate.
pub type Vec2 = nalgebra::Vector2<f64>;

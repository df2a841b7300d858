//! Forward and inverse solvers for linear-quadratic nonzero-sum differential games.
//!
//! * [`game`]: game model, Lyapunov iterations for the coupled Riccati equations.
//! * [`trajectory`]: simulation, probing noise, feedback estimation, integral data.
//! * [`model_based`]: inverse game synthesis with known dynamics.
//! * [`model_free`]: inverse game synthesis from integral data only.
//! * [`equivalence`]: equivalence checks and families of equivalent games.

pub mod equivalence;
pub mod error;
pub mod game;
pub mod linalg;
pub mod model_based;
pub mod model_free;
pub mod scenarios;
pub mod trajectory;

// lets the shared test oracles name this crate by its external path
#[cfg(test)]
extern crate self as invgame_core;
#[cfg(test)]
mod tests;

pub use error::{Error, Result};
pub use game::{
    are_residual, closed_loop_matrix, evaluate_cost, feedback_from_value, is_stabilizing,
    lyapunov_iterations, solve_nash, stabilizing_seed, AreResidualSet, Dynamics, FeedbackSet,
    GameSpec, LyapunovOptions, LyapunovSolution, ValueSet,
};

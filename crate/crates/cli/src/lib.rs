//! Experiment runner for inverse linear-quadratic games.

pub mod runner;
pub mod scenario;

/// Failures are split by exit code: input errors (1) never leave
/// artifacts; numerical failures (2) keep what was produced.
#[derive(Debug, Clone, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

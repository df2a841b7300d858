use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("{what} is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: String, asymmetry: f64 },

    #[error("{what} is not positive definite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite { what: String, min_eigenvalue: f64 },

    #[error("{what} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveSemidefinite { what: String, min_eigenvalue: f64 },

    #[error("{what} is singular")]
    Singular { what: String },

    #[error("matrix is not stable (spectral abscissa {abscissa:.6e})")]
    NotStable { abscissa: f64 },

    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },

    #[error("closed loop lost stability at iteration {iteration} (spectral abscissa {abscissa:.6e})")]
    LostStability { iteration: usize, abscissa: f64 },

    #[error("no convergence after {iterations} iterations (last change {last_change:.3e})")]
    MaxIterations { iterations: usize, last_change: f64 },

    #[error("{what}: design matrix is rank deficient (condition estimate {condition:.3e})")]
    RankDeficient { what: String, condition: f64 },

    #[error("insufficient excitation in {what}: condition estimate {condition:.3e} exceeds {threshold:.1e}")]
    InsufficientExcitation {
        what: String,
        condition: f64,
        threshold: f64,
    },

    #[error("insufficient data: {rows} rows available, at least {required} required")]
    InsufficientData { rows: usize, required: usize },

    #[error("interval {interval} holds fewer than two samples")]
    EmptyInterval { interval: usize },

    #[error("line search stalled for player {player} at iteration {iteration} (objective {objective:.6e})")]
    LineSearchStall {
        player: usize,
        iteration: usize,
        objective: f64,
    },

    #[error("gradient overshoot for player {player} at iteration {iteration}: objective grew by factor {ratio:.3e}; reduce the learning rate")]
    Overshoot {
        player: usize,
        iteration: usize,
        ratio: f64,
    },

    #[error("inconsistent solution: {0}")]
    Inconsistent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

//! The two benchmark games used by the examples, tests and bundled CLI scenarios.

use nalgebra::DMatrix;

use crate::game::{Dynamics, FeedbackSet, GameSpec};

fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

fn scalar_grid(rows: &[&[f64]]) -> Vec<Vec<DMatrix<f64>>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect())
        .collect()
}

/// Three scalar-input players on an open-loop unstable plane.
pub fn three_player_dynamics() -> Dynamics {
    Dynamics::new(
        m(2, 2, &[3.0, -2.0, 4.0, -1.0]),
        vec![m(2, 1, &[1.0, 0.0]), m(2, 1, &[0.0, 1.0]), m(2, 1, &[1.0, 1.0])],
    )
    .expect("valid fixture")
}

/// Ground-truth costs of the three-player demonstration.
pub fn three_player_demonstrated() -> GameSpec {
    GameSpec::new(
        three_player_dynamics(),
        vec![
            m(2, 2, &[7.0, 2.0, 2.0, 5.0]),
            DMatrix::identity(2, 2) * 3.0,
            DMatrix::identity(2, 2),
        ],
        scalar_grid(&[&[3.0, 1.0, 1.0], &[1.0, 2.0, 0.0], &[0.0, 1.0, 4.0]]),
    )
    .expect("valid fixture")
}

/// Equilibrium gains of the three-player demonstration at four decimals.
pub fn three_player_printed_gains() -> FeedbackSet {
    FeedbackSet::new(vec![
        m(1, 2, &[4.2499, -0.9409]),
        m(1, 2, &[-0.4108, 0.9187]),
        m(1, 2, &[0.2334, 0.1295]),
    ])
}

/// Initial guess handed to the inverse solvers: `Qᵢ = I` with a different `R` grid.
pub fn three_player_initialized() -> GameSpec {
    GameSpec::new(
        three_player_dynamics(),
        vec![DMatrix::identity(2, 2); 3],
        scalar_grid(&[&[3.0, 2.0, 1.0], &[2.0, 3.0, 1.0], &[2.0, 3.0, 1.0]]),
    )
    .expect("valid fixture")
}

pub const THREE_PLAYER_LEARNING_RATES: [f64; 3] = [1.5, 1.5, 0.15];

/// Two scalar-input players with decoupled diagonal drift.
pub fn two_player_dynamics() -> Dynamics {
    Dynamics::new(
        m(2, 2, &[3.0, 0.0, 0.0, -4.0]),
        vec![m(2, 1, &[1.0, 1.0]), m(2, 1, &[0.0, 1.0])],
    )
    .expect("valid fixture")
}

pub fn two_player_demonstrated() -> GameSpec {
    GameSpec::new(
        two_player_dynamics(),
        vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(2, 2) * 3.0],
        scalar_grid(&[&[2.0, 1.0], &[1.0, 6.0]]),
    )
    .expect("valid fixture")
}

pub fn two_player_printed_gains() -> FeedbackSet {
    FeedbackSet::new(vec![m(1, 2, &[6.2586, 0.0186]), m(1, 2, &[-0.0532, 0.0620])])
}

/// `Qᵢ = I`, `R = I`. These unit weights are the ones consistent with the
/// reference values of the two-player inverse run.
pub fn two_player_initialized() -> GameSpec {
    GameSpec::new(
        two_player_dynamics(),
        vec![DMatrix::identity(2, 2); 2],
        scalar_grid(&[&[1.0, 0.0], &[0.0, 1.0]]),
    )
    .expect("valid fixture")
}

pub const TWO_PLAYER_LEARNING_RATES: [f64; 2] = [0.3, 0.4];

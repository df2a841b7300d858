//! Equivalence of games: two games are equivalent when their stabilizing
//! equilibria induce the same feedback laws.
//!
//! Replacing `Rᵢⱼ` (`i ≠ j`) by `R′ᵢⱼ` and `Qᵢ` by
//! `Qᵢ + Σ_{j≠i} Fⱼᵀ(Rᵢⱼ - R′ᵢⱼ)Fⱼ` leaves every Riccati equation satisfied
//! by the same `(K, F)`, which yields whole families of equivalent games.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{
    are_residual, closed_loop_matrix, feedback_from_value, lyapunov_iterations, Dynamics,
    FeedbackSet, GameSpec, LyapunovOptions,
};
use crate::linalg::{asymmetry, ensure_shape, spectral_abscissa, symmetrize};
use crate::model_based::SynthesizedGame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
    /// The re-solve failed; nothing is claimed either way.
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationMethod {
    /// Admissible weights: full Lyapunov iterations from the reference seed.
    LyapunovIterations,
    /// Indefinite weights: the same sweeps without definiteness requirements,
    /// which checks that the reference is a fixed point.
    FixedPoint,
}

/// Outcome of [`verify_equivalent`]. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub method: VerificationMethod,
    pub tol: f64,
    pub iterations: Option<usize>,
    pub residual_norms: Vec<f64>,
    pub max_feedback_deviation: Option<f64>,
    pub spectral_abscissa: Option<f64>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub feedback: Vec<Vec<Vec<f64>>>,
    pub message: String,
}

impl VerificationReport {
    pub fn is_equivalent(&self) -> bool {
        self.verdict == Verdict::Equivalent
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Re-solves `candidate` from `reference_fb` and checks that (a) the Riccati
/// residuals vanish, (b) the solved feedback equals the reference and (c)
/// the closed loop is stable, all within `tol`. Residuals are compared
/// against `tol · max(1, ‖Kᵢ‖_F)`.
pub fn verify_equivalent(
    candidate: &GameSpec,
    reference_fb: &FeedbackSet,
    tol: f64,
) -> Result<VerificationReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    reference_fb.check_against(candidate.dynamics())?;
    let admissible = candidate.check_admissible().is_ok();
    let method = if admissible {
        VerificationMethod::LyapunovIterations
    } else {
        VerificationMethod::FixedPoint
    };
    let opts = LyapunovOptions {
        eps: vec![(tol * 1e-2).max(1e-13)],
        max_iter: 2000,
        enforce_admissibility: admissible,
    };
    let mut report = VerificationReport {
        verdict: Verdict::Undetermined,
        method,
        tol,
        iterations: None,
        residual_norms: Vec::new(),
        max_feedback_deviation: None,
        spectral_abscissa: None,
        values: Vec::new(),
        feedback: Vec::new(),
        message: String::new(),
    };
    let sol = match lyapunov_iterations(candidate, reference_fb, &opts) {
        Ok(sol) => sol,
        Err(Error::LostStability { iteration: 0, abscissa }) => {
            report.verdict = Verdict::NotEquivalent;
            report.spectral_abscissa = Some(abscissa);
            report.message = "reference feedback does not stabilize the candidate".into();
            return Ok(report);
        }
        Err(e) => {
            report.message = format!("re-solve failed: {e}");
            return Ok(report);
        }
    };
    let fb = feedback_from_value(candidate, &sol.values)?;
    let res = are_residual(candidate, &sol.values, &fb)?;
    let deviation = fb.max_abs_diff(reference_fb);
    let abscissa = spectral_abscissa(&closed_loop_matrix(candidate.dynamics(), &fb)?)?;
    let residual_ok = res
        .norms
        .iter()
        .zip(sol.values.values())
        .all(|(r, k)| *r <= tol * k.norm().max(1.0));
    let feedback_ok = deviation <= tol;
    let stable = abscissa < 0.0;

    report.iterations = Some(sol.iterations);
    report.residual_norms = res.norms.clone();
    report.max_feedback_deviation = Some(deviation);
    report.spectral_abscissa = Some(abscissa);
    report.values = sol.values.values().iter().map(rows).collect();
    report.feedback = fb.gains().iter().map(rows).collect();
    report.verdict = if residual_ok && feedback_ok && stable {
        Verdict::Equivalent
    } else {
        Verdict::NotEquivalent
    };
    let mut failed = Vec::new();
    if !residual_ok {
        failed.push("riccati residual");
    }
    if !feedback_ok {
        failed.push("feedback deviation");
    }
    if !stable {
        failed.push("closed-loop stability");
    }
    report.message = if failed.is_empty() {
        "all checks passed".into()
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok(report)
}

/// Replacement `R′ᵢⱼ` for one off-diagonal weight.
#[derive(Debug, Clone, PartialEq)]
pub struct OffDiagonalWeight {
    pub i: usize,
    pub j: usize,
    pub r: DMatrix<f64>,
}

/// A set of off-diagonal replacements applied to a synthesized game.
/// `Kᵢ` and `Rᵢᵢ` never change.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdjustmentRequest {
    pub new_r_offdiag: Vec<OffDiagonalWeight>,
}

/// Adjusted weights `(Q′, R′)` for `base`.
pub fn adjust_costs(
    base: &SynthesizedGame,
    req: &AdjustmentRequest,
) -> Result<(Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>)> {
    let players = base.r.len();
    let mut r_new = base.r.clone();
    for adj in &req.new_r_offdiag {
        if adj.i >= players || adj.j >= players {
            return Err(Error::InvalidArgument(format!(
                "no weight R[{}][{}] in a {players}-player game",
                adj.i, adj.j
            )));
        }
        if adj.i == adj.j {
            return Err(Error::InvalidArgument(format!(
                "R[{0}][{0}] is fixed by the equivalence construction",
                adj.i
            )));
        }
        let m = base.r[adj.j][adj.j].nrows();
        ensure_shape(&adj.r, m, m, &format!("R'[{}][{}]", adj.i, adj.j))?;
        let asym = asymmetry(&adj.r);
        if asym > 1e-12 * adj.r.norm().max(1.0) {
            return Err(Error::NotSymmetric {
                what: format!("R'[{}][{}]", adj.i, adj.j),
                asymmetry: asym,
            });
        }
        r_new[adj.i][adj.j] = symmetrize(&adj.r);
    }
    let f = base.f_star.gains();
    let q_new = (0..players)
        .map(|i| {
            let mut q = base.q_star[i].clone();
            for j in (0..players).filter(|&j| j != i) {
                q += f[j].transpose() * (&base.r[i][j] - &r_new[i][j]) * &f[j];
            }
            symmetrize(&q)
        })
        .collect();
    Ok((q_new, r_new))
}

/// The adjusted game over `dynamics`. Off-diagonal weights may be indefinite.
pub fn adjust_game(
    base: &SynthesizedGame,
    req: &AdjustmentRequest,
    dynamics: &Dynamics,
) -> Result<GameSpec> {
    let (q, r) = adjust_costs(base, req)?;
    GameSpec::new(dynamics.clone(), q, r)
}

/// One member of an equivalent family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMember {
    pub game: GameSpec,
    pub report: VerificationReport,
}

/// Maps [`adjust_game`] over `offsets` and verifies each result against
/// `base.f_star`. Failures are kept per item.
pub fn enumerate_equivalent_family(
    base: &SynthesizedGame,
    dynamics: &Dynamics,
    offsets: &[AdjustmentRequest],
    tol: f64,
) -> Vec<Result<FamilyMember>> {
    offsets
        .iter()
        .map(|req| {
            let game = adjust_game(base, req, dynamics)?;
            let report = verify_equivalent(&game, &base.f_star, tol)?;
            Ok(FamilyMember { game, report })
        })
        .collect()
}

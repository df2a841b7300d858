//! LQ nonzero-sum games and the forward problem.
//!
//! Player `i` applies `uᵢ = -Fᵢ x` to the shared dynamics `ẋ = A x + Σ Bᵢ uᵢ`
//! and pays `∫ xᵀQᵢx + Σⱼ uⱼᵀRᵢⱼuⱼ dt`. A stationary feedback Nash equilibrium
//! is given by symmetric `Kᵢ` solving the coupled Riccati equations with
//! `Fᵢ = Rᵢᵢ⁻¹BᵢᵀKᵢ` and `A - Σ BⱼFⱼ` stable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, ensure_positive_definite, ensure_positive_semidefinite, ensure_shape,
    ensure_square, is_finite, spd_solve, spectral_abscissa, symmetrize,
};

pub use crate::linalg::{solve_lyapunov, solve_lyapunov_kronecker};

const SYMMETRY_TOL: f64 = 1e-12;

/// Shared dynamics `(A, {Bᵢ})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
}

impl Dynamics {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = ensure_square(&a, "A")?;
        if n == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if b.is_empty() {
            return Err(Error::InvalidArgument("at least one player is required".into()));
        }
        if !is_finite(&a) {
            return Err(Error::NonFinite { what: "A".into() });
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.nrows() != n || bi.ncols() == 0 {
                return Err(Error::dims(
                    format!("B[{i}]"),
                    format!("{n}xm with m>0"),
                    format!("{}x{}", bi.nrows(), bi.ncols()),
                ));
            }
            if !is_finite(bi) {
                return Err(Error::NonFinite {
                    what: format!("B[{i}]"),
                });
            }
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn players(&self) -> usize {
        self.b.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.b.iter().map(|b| b.ncols()).collect()
    }
}

/// A complete game: dynamics plus cost weights `{Qᵢ}` and the grid `{Rᵢⱼ}`.
///
/// `Rᵢⱼ` weighs player `j`'s input in player `i`'s cost, so it is `mⱼ×mⱼ`.
/// Only `Rᵢᵢ > 0` is enforced here; the stronger admissibility conditions
/// needed by the Lyapunov iterations live in [`GameSpec::check_admissible`].
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    dynamics: Dynamics,
    q: Vec<DMatrix<f64>>,
    r: Vec<Vec<DMatrix<f64>>>,
}

impl GameSpec {
    pub fn new(
        dynamics: Dynamics,
        q: Vec<DMatrix<f64>>,
        r: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let n = dynamics.state_dim();
        let players = dynamics.players();
        let m = dynamics.input_dims();
        if q.len() != players {
            return Err(Error::dims("Q list", players, q.len()));
        }
        if r.len() != players {
            return Err(Error::dims("R grid rows", players, r.len()));
        }
        let mut q_sym = Vec::with_capacity(players);
        for (i, qi) in q.iter().enumerate() {
            ensure_shape(qi, n, n, &format!("Q[{i}]"))?;
            check_symmetric(qi, &format!("Q[{i}]"))?;
            q_sym.push(symmetrize(qi));
        }
        let mut r_sym = Vec::with_capacity(players);
        for (i, row) in r.iter().enumerate() {
            if row.len() != players {
                return Err(Error::dims(format!("R grid row {i}"), players, row.len()));
            }
            let mut out = Vec::with_capacity(players);
            for (j, rij) in row.iter().enumerate() {
                let what = format!("R[{i}][{j}]");
                ensure_shape(rij, m[j], m[j], &what)?;
                check_symmetric(rij, &what)?;
                let rij = symmetrize(rij);
                if i == j {
                    ensure_positive_definite(&rij, &what)?;
                }
                out.push(rij);
            }
            r_sym.push(out);
        }
        Ok(Self {
            dynamics,
            q: q_sym,
            r: r_sym,
        })
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn q(&self) -> &[DMatrix<f64>] {
        &self.q
    }

    pub fn r(&self) -> &[Vec<DMatrix<f64>>] {
        &self.r
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn players(&self) -> usize {
        self.dynamics.players()
    }

    /// Same dynamics and `R`, new state weights.
    pub fn with_q(&self, q: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(self.dynamics.clone(), q, self.r.clone())
    }

    /// `Qᵢ > 0`, `Rᵢᵢ > 0`, `Rᵢⱼ ≥ 0`: the conditions under which the
    /// Lyapunov iterations have a unique positive definite limit.
    pub fn check_admissible(&self) -> Result<()> {
        for (i, qi) in self.q.iter().enumerate() {
            ensure_positive_definite(qi, &format!("Q[{i}]"))?;
        }
        for (i, row) in self.r.iter().enumerate() {
            for (j, rij) in row.iter().enumerate() {
                if i != j {
                    ensure_positive_semidefinite(rij, &format!("R[{i}][{j}]"))?;
                }
            }
        }
        Ok(())
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !is_finite(m) {
        return Err(Error::NonFinite { what: what.into() });
    }
    let asym = asymmetry(m);
    if asym >= SYMMETRY_TOL * m.norm().max(1.0) {
        return Err(Error::NotSymmetric {
            what: what.into(),
            asymmetry: asym,
        });
    }
    Ok(())
}

/// Per-player feedback gains `Fᵢ` (`mᵢ×n`), with `uᵢ = -Fᵢ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSet {
    gains: Vec<DMatrix<f64>>,
}

impl FeedbackSet {
    pub fn new(gains: Vec<DMatrix<f64>>) -> Self {
        Self { gains }
    }

    pub fn zeros(dynamics: &Dynamics) -> Self {
        let n = dynamics.state_dim();
        Self::new(
            dynamics
                .input_dims()
                .into_iter()
                .map(|m| DMatrix::zeros(m, n))
                .collect(),
        )
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn into_gains(self) -> Vec<DMatrix<f64>> {
        self.gains
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn check_against(&self, dynamics: &Dynamics) -> Result<()> {
        if self.gains.len() != dynamics.players() {
            return Err(Error::dims(
                "feedback set",
                dynamics.players(),
                self.gains.len(),
            ));
        }
        let n = dynamics.state_dim();
        for (i, (f, m)) in self.gains.iter().zip(dynamics.input_dims()).enumerate() {
            ensure_shape(f, m, n, &format!("F[{i}]"))?;
        }
        Ok(())
    }

    /// Largest absolute entry difference against another set of the same shape.
    pub fn max_abs_diff(&self, other: &FeedbackSet) -> f64 {
        self.gains
            .iter()
            .zip(&other.gains)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for FeedbackSet {
    type Output = DMatrix<f64>;
    fn index(&self, i: usize) -> &DMatrix<f64> {
        &self.gains[i]
    }
}

/// Per-player symmetric value matrices `Kᵢ`. Entries are symmetrized on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSet {
    values: Vec<DMatrix<f64>>,
}

impl ValueSet {
    pub fn new(values: Vec<DMatrix<f64>>) -> Self {
        Self {
            values: values.iter().map(symmetrize).collect(),
        }
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<DMatrix<f64>> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl std::ops::Index<usize> for ValueSet {
    type Output = DMatrix<f64>;
    fn index(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }
}

/// Per-player Riccati residual matrices and their Frobenius norms.
#[derive(Debug, Clone, PartialEq)]
pub struct AreResidualSet {
    pub residuals: Vec<DMatrix<f64>>,
    pub norms: Vec<f64>,
}

impl AreResidualSet {
    pub fn max_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }
}

/// `A - Σⱼ BⱼFⱼ`.
pub fn closed_loop_matrix(dynamics: &Dynamics, fb: &FeedbackSet) -> Result<DMatrix<f64>> {
    fb.check_against(dynamics)?;
    let mut acl = dynamics.a.clone();
    for (b, f) in dynamics.b.iter().zip(fb.gains()) {
        acl -= b * f;
    }
    Ok(acl)
}

/// True iff every eigenvalue of `m` has real part below `-margin`.
pub fn is_stabilizing(m: &DMatrix<f64>, margin: f64) -> Result<bool> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument("stability margin must be >= 0".into()));
    }
    Ok(spectral_abscissa(m)? < -margin)
}

/// `Fᵢ = Rᵢᵢ⁻¹ BᵢᵀKᵢ`.
pub fn feedback_from_value(spec: &GameSpec, vals: &ValueSet) -> Result<FeedbackSet> {
    check_values(spec.dynamics(), vals)?;
    let gains = spec
        .dynamics
        .b
        .iter()
        .zip(vals.values())
        .enumerate()
        .map(|(i, (b, k))| spd_solve(&spec.r[i][i], &(b.transpose() * k), &format!("R[{i}][{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeedbackSet::new(gains))
}

pub(crate) fn check_values(dynamics: &Dynamics, vals: &ValueSet) -> Result<()> {
    if vals.len() != dynamics.players() {
        return Err(Error::dims("value set", dynamics.players(), vals.len()));
    }
    let n = dynamics.state_dim();
    for (i, k) in vals.values().iter().enumerate() {
        ensure_shape(k, n, n, &format!("K[{i}]"))?;
    }
    Ok(())
}

/// Weight of the per-iteration Lyapunov equation: `Qᵢ + Σⱼ FⱼᵀRᵢⱼFⱼ`.
pub(crate) fn effective_weight(
    q: &DMatrix<f64>,
    r_row: &[DMatrix<f64>],
    fb: &FeedbackSet,
) -> DMatrix<f64> {
    let mut w = q.clone();
    for (rij, fj) in r_row.iter().zip(fb.gains()) {
        w += fj.transpose() * rij * fj;
    }
    symmetrize(&w)
}

/// Coupled-ARE residuals
/// `AᵀKᵢ + KᵢA + Qᵢ + Σ FⱼᵀRᵢⱼFⱼ - SᵀKᵢ - KᵢS` with `S = Σ BⱼFⱼ`.
pub fn are_residual(spec: &GameSpec, vals: &ValueSet, fb: &FeedbackSet) -> Result<AreResidualSet> {
    check_values(spec.dynamics(), vals)?;
    fb.check_against(spec.dynamics())?;
    let acl = closed_loop_matrix(spec.dynamics(), fb)?;
    let mut residuals = Vec::with_capacity(spec.players());
    for (i, k) in vals.values().iter().enumerate() {
        let w = effective_weight(&spec.q[i], &spec.r[i], fb);
        let res = acl.transpose() * k + k * &acl + w;
        residuals.push(symmetrize(&res));
    }
    let norms = residuals.iter().map(|r| r.norm()).collect();
    Ok(AreResidualSet { residuals, norms })
}

/// Stopping rule and admissibility policy for [`lyapunov_iterations`].
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovOptions {
    /// Per-player thresholds on `‖Kᵢ⁽ᵏ⁺¹⁾ - Kᵢ⁽ᵏ⁾‖_F`. A single entry applies to all players.
    pub eps: Vec<f64>,
    pub max_iter: usize,
    /// Require `Qᵢ > 0`, `Rᵢⱼ ≥ 0` up front and a positive definite result.
    pub enforce_admissibility: bool,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            eps: vec![1e-9],
            max_iter: 500,
            enforce_admissibility: true,
        }
    }
}

impl LyapunovOptions {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps: vec![eps],
            ..Self::default()
        }
    }

    pub(crate) fn threshold(&self, player: usize) -> f64 {
        if self.eps.len() == 1 {
            self.eps[0]
        } else {
            self.eps[player]
        }
    }

    pub(crate) fn validate(&self, players: usize) -> Result<()> {
        if self.eps.len() != 1 && self.eps.len() != players {
            return Err(Error::dims("Lyapunov thresholds", players, self.eps.len()));
        }
        if self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidArgument(
                "Lyapunov thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSolution {
    pub values: ValueSet,
    pub feedback: FeedbackSet,
    /// Number of Lyapunov solves per player.
    pub iterations: usize,
}

/// Multiplayer Lyapunov iterations for the coupled AREs, seeded at `fb0`.
///
/// Each sweep solves `Aclᵀ Kᵢ + Kᵢ Acl = -(Qᵢ + Σ FⱼᵀRᵢⱼFⱼ)` for every
/// player against the current closed loop and then refreshes
/// `Fᵢ = Rᵢᵢ⁻¹BᵢᵀKᵢ`.
pub fn lyapunov_iterations(
    spec: &GameSpec,
    fb0: &FeedbackSet,
    opts: &LyapunovOptions,
) -> Result<LyapunovSolution> {
    let dynamics = spec.dynamics();
    fb0.check_against(dynamics)?;
    opts.validate(spec.players())?;
    if opts.enforce_admissibility {
        spec.check_admissible()?;
    }

    let mut fb = fb0.clone();
    let mut prev: Option<ValueSet> = None;
    let mut last_change = f64::INFINITY;
    for k in 0..opts.max_iter {
        let acl = closed_loop_matrix(dynamics, &fb)?;
        let abscissa = spectral_abscissa(&acl)?;
        if !(abscissa < 0.0) {
            return Err(Error::LostStability {
                iteration: k,
                abscissa,
            });
        }
        let values = (0..spec.players())
            .map(|i| solve_lyapunov(&acl, &effective_weight(&spec.q[i], &spec.r[i], &fb)))
            .collect::<Result<Vec<_>>>()?;
        let values = ValueSet::new(values);
        fb = feedback_from_value(spec, &values)?;

        let mut done = prev.is_some();
        if let Some(p) = &prev {
            last_change = 0.0;
            for i in 0..spec.players() {
                let change = (&values[i] - &p[i]).norm();
                if !change.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("Lyapunov iterate {k}"),
                    });
                }
                last_change = last_change.max(change);
                if change > opts.threshold(i) {
                    done = false;
                }
            }
        }
        if done {
            let acl = closed_loop_matrix(dynamics, &fb)?;
            let abscissa = spectral_abscissa(&acl)?;
            if !(abscissa < 0.0) {
                return Err(Error::LostStability {
                    iteration: k + 1,
                    abscissa,
                });
            }
            if opts.enforce_admissibility {
                for (i, kv) in values.values().iter().enumerate() {
                    ensure_positive_definite(kv, &format!("K[{i}]"))?;
                }
            }
            return Ok(LyapunovSolution {
                values,
                feedback: fb,
                iterations: k + 1,
            });
        }
        prev = Some(values);
    }
    Err(Error::MaxIterations {
        iterations: opts.max_iter,
        last_change,
    })
}

/// A stabilizing feedback for `(A, [B₁ … B_N])` by Bass's method:
/// `F = Bᵀ P⁻¹` with `(A + βI)P + P(A + βI)ᵀ = 2BBᵀ`, `β` above the
/// largest `|Re λ(A)|` so that `-(A + βI)` is stable. Requires a
/// controllable pair.
pub fn stabilizing_seed(dynamics: &Dynamics) -> Result<FeedbackSet> {
    let n = dynamics.state_dim();
    let abscissa = spectral_abscissa(&dynamics.a)?;
    if abscissa < 0.0 {
        return Ok(FeedbackSet::zeros(dynamics));
    }
    let beta = abscissa.max(spectral_abscissa(&(-&dynamics.a))?) + 1.0;
    let total_m: usize = dynamics.input_dims().iter().sum();
    let mut b = DMatrix::zeros(n, total_m);
    let mut col = 0;
    for bi in &dynamics.b {
        b.view_mut((0, col), (n, bi.ncols())).copy_from(bi);
        col += bi.ncols();
    }
    let shifted = &dynamics.a + DMatrix::<f64>::identity(n, n) * beta;
    let p = solve_lyapunov(&(-shifted.transpose()), &(&b * b.transpose() * 2.0))?;
    let min = crate::linalg::min_symmetric_eigenvalue(&p);
    if !(min > 1e-12 * p.norm().max(1.0)) {
        return Err(Error::Singular {
            what: "controllability Gramian (the pair (A, B) is not controllable)".into(),
        });
    }
    let stacked = spd_solve(&p, &b, "controllability Gramian")?.transpose();
    let mut gains = Vec::with_capacity(dynamics.players());
    let mut row = 0;
    for bi in &dynamics.b {
        gains.push(stacked.rows(row, bi.ncols()).clone_owned());
        row += bi.ncols();
    }
    let fb = FeedbackSet::new(gains);
    let abscissa = spectral_abscissa(&closed_loop_matrix(dynamics, &fb)?)?;
    if !(abscissa < 0.0) {
        return Err(Error::NotStable { abscissa });
    }
    Ok(fb)
}

/// Solves the forward game from `seed`, or from [`stabilizing_seed`] when none is given.
pub fn solve_nash(
    spec: &GameSpec,
    seed: Option<&FeedbackSet>,
    opts: &LyapunovOptions,
) -> Result<LyapunovSolution> {
    let seed = match seed {
        Some(s) => s.clone(),
        None => stabilizing_seed(spec.dynamics())?,
    };
    lyapunov_iterations(spec, &seed, opts)
}

/// `x₀ᵀKᵢx₀` for every player.
pub fn evaluate_cost(vals: &ValueSet, x0: &DVector<f64>) -> Result<Vec<f64>> {
    vals.values()
        .iter()
        .enumerate()
        .map(|(i, k)| {
            ensure_shape(k, x0.len(), x0.len(), &format!("K[{i}]"))?;
            Ok((x0.transpose() * k * x0)[(0, 0)])
        })
        .collect()
}

//! Inverse game synthesis from trajectory data alone.
//!
//! For player `i` and the current feedbacks `Fⱼ`, integrating
//! `d/dt xᵀKᵢx` along the data over `[t_{l-1}, t_l]` gives one linear
//! equation per interval in the unknowns `Kᵢ`, the improved gain `Fᵢ⁺`
//! and `Yⱼᵢ = BⱼᵀKᵢ` for each opponent, without reference to `A`:
//!
//! ```text
//! δ_xx K̂ᵢ - 2[I_xuᵢ(I⊗Rᵢᵢ) + I_xx(I⊗FᵢᵀRᵢᵢ)] vec(Fᵢ⁺)
//!          - 2 Σ_{j≠i} [I_xuⱼ + I_xx(I⊗Fⱼᵀ)] vec(Yⱼᵢ) = -I_xx vec(Qᵢ + Σⱼ FⱼᵀRᵢⱼFⱼ)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, ensure_positive_definite, ensure_positive_semidefinite, ensure_shape, inverse,
    symmetrize, unvec, vec_of,
};
use crate::model_based::{descent_loop, gradient_with_map, Algorithm1Config, SynthesizedGame};
use crate::game::{closed_loop_matrix, Dynamics, FeedbackSet, ValueSet};
use crate::linalg::spectral_abscissa;
use crate::trajectory::{build_integral_dataset, estimate_feedback, IntegralDataset, TrajectoryLog};

/// Column-normalized condition number above which a data system is refused.
pub const EXCITATION_CONDITION_LIMIT: f64 = 1e10;

/// `n(n+1)/2`.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper triangle in row-major order with off-diagonal entries doubled.
pub fn smat_pack(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    ensure_shape(m, n, n, "packed matrix")?;
    let asym = asymmetry(m);
    if asym > 1e-10 * m.norm().max(1.0) {
        return Err(Error::NotSymmetric {
            what: "packed matrix".into(),
            asymmetry: asym,
        });
    }
    let mut out = Vec::with_capacity(packed_len(n));
    for a in 0..n {
        out.push(m[(a, a)]);
        for b in a + 1..n {
            out.push(m[(a, b)] + m[(b, a)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Inverse of [`smat_pack`].
pub fn smat_unpack(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if v.len() != packed_len(n) {
        return Err(Error::dims("packed vector", packed_len(n), v.len()));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for a in 0..n {
        m[(a, a)] = v[k];
        k += 1;
        for b in a + 1..n {
            m[(a, b)] = 0.5 * v[k];
            m[(b, a)] = 0.5 * v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// `x̂ = (x₁², x₁x₂, …, x₁xₙ, x₂², …)`, so that `x̂ᵀ smat_pack(P) = xᵀPx`.
pub fn state_quad_pack(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(packed_len(n));
    for a in 0..n {
        for b in a..n {
            out.push(x[a] * x[b]);
        }
    }
    DVector::from_vec(out)
}

/// Weights of an inverse model-free run: `Q⁰` and the `R` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSet {
    q: Vec<DMatrix<f64>>,
    r: Vec<Vec<DMatrix<f64>>>,
}

impl CostSet {
    /// Requires `Qᵢ > 0`, `Rᵢᵢ > 0` and `Rᵢⱼ ≥ 0`.
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        let players = q.len();
        if players == 0 {
            return Err(Error::InvalidArgument("at least one player is required".into()));
        }
        if r.len() != players {
            return Err(Error::dims("R grid rows", players, r.len()));
        }
        let n = q[0].nrows();
        let mut q_sym = Vec::with_capacity(players);
        for (i, qi) in q.iter().enumerate() {
            ensure_shape(qi, n, n, &format!("Q[{i}]"))?;
            check_sym(qi, &format!("Q[{i}]"))?;
            let qi = symmetrize(qi);
            ensure_positive_definite(&qi, &format!("Q[{i}]"))?;
            q_sym.push(qi);
        }
        let dims: Vec<usize> = (0..players).map(|j| r[j].get(j).map_or(0, |m| m.nrows())).collect();
        let mut r_sym = Vec::with_capacity(players);
        for (i, row) in r.iter().enumerate() {
            if row.len() != players {
                return Err(Error::dims(format!("R grid row {i}"), players, row.len()));
            }
            let mut out = Vec::with_capacity(players);
            for (j, rij) in row.iter().enumerate() {
                let what = format!("R[{i}][{j}]");
                ensure_shape(rij, dims[j], dims[j], &what)?;
                check_sym(rij, &what)?;
                let rij = symmetrize(rij);
                if i == j {
                    ensure_positive_definite(&rij, &what)?;
                } else {
                    ensure_positive_semidefinite(&rij, &what)?;
                }
                out.push(rij);
            }
            r_sym.push(out);
        }
        Ok(Self { q: q_sym, r: r_sym })
    }

    pub fn q(&self) -> &[DMatrix<f64>] {
        &self.q
    }

    pub fn r(&self) -> &[Vec<DMatrix<f64>>] {
        &self.r
    }

    pub fn players(&self) -> usize {
        self.q.len()
    }

    pub fn state_dim(&self) -> usize {
        self.q[0].nrows()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        (0..self.players()).map(|j| self.r[j][j].nrows()).collect()
    }
}

fn check_sym(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = asymmetry(m);
    if !asym.is_finite() || asym >= 1e-12 * m.norm().max(1.0) {
        return Err(Error::NotSymmetric {
            what: what.into(),
            asymmetry: asym,
        });
    }
    Ok(())
}

/// Stacked unknowns `(K̂ᵢ, vec Fᵢ, {vec Yⱼᵢ})` of one player's data system.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedUnknowns {
    pub k_hat: DVector<f64>,
    pub f_vec: DVector<f64>,
    /// `(j, vec Yⱼᵢ)` for every opponent `j`, ascending.
    pub y_vec: Vec<(usize, DVector<f64>)>,
}

/// `H u = Ξ`, solved in the least-squares sense.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSystem {
    pub h: DMatrix<f64>,
    pub xi: DVector<f64>,
    /// Condition number of `H` after scaling its columns to unit norm.
    pub condition_estimate: f64,
    player: usize,
    state_dim: usize,
    input_dims: Vec<usize>,
}

impl LeastSquaresSystem {
    pub fn player(&self) -> usize {
        self.player
    }

    /// Least-squares solution by SVD of the column-scaled matrix.
    pub fn solve(&self) -> Result<DVector<f64>> {
        lstsq(&self.h, &self.xi, "model-free data system")
    }

    pub fn split(&self, u: &DVector<f64>) -> Result<PackedUnknowns> {
        let n = self.state_dim;
        let nq = packed_len(n);
        if u.len() != self.h.ncols() {
            return Err(Error::dims("stacked unknowns", self.h.ncols(), u.len()));
        }
        let mi = self.input_dims[self.player];
        let k_hat = u.rows(0, nq).clone_owned();
        let f_vec = u.rows(nq, n * mi).clone_owned();
        let mut off = nq + n * mi;
        let mut y_vec = Vec::new();
        for (j, &mj) in self.input_dims.iter().enumerate() {
            if j != self.player {
                y_vec.push((j, u.rows(off, n * mj).clone_owned()));
                off += n * mj;
            }
        }
        Ok(PackedUnknowns { k_hat, f_vec, y_vec })
    }
}

/// Column-scaled condition number; infinite when a column vanishes.
fn scaled_condition(h: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let scales = DVector::from_iterator(h.ncols(), h.column_iter().map(|c| c.norm()));
    if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return (f64::INFINITY, scales);
    }
    let mut scaled = h.clone();
    for (mut c, s) in scaled.column_iter_mut().zip(scales.iter()) {
        c /= *s;
    }
    let sv = scaled.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    (if lo > 0.0 { hi / lo } else { f64::INFINITY }, scales)
}

fn lstsq(h: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if h.nrows() < h.ncols() {
        return Err(Error::InsufficientData {
            rows: h.nrows(),
            required: h.ncols(),
        });
    }
    let (condition, scales) = scaled_condition(h);
    if !(condition <= EXCITATION_CONDITION_LIMIT) {
        return Err(Error::InsufficientExcitation {
            what: what.into(),
            condition,
            threshold: EXCITATION_CONDITION_LIMIT,
        });
    }
    let mut scaled = h.clone();
    for (mut c, s) in scaled.column_iter_mut().zip(scales.iter()) {
        c /= *s;
    }
    let sol = scaled
        .svd(true, true)
        .solve(rhs, 0.0)
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    let sol = sol.component_div(&scales);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: what.into() });
    }
    Ok(sol)
}

fn check_dataset(data: &IntegralDataset, costs: &CostSet) -> Result<()> {
    data.validate()?;
    if data.state_dim() != costs.state_dim() {
        return Err(Error::dims("dataset state dimension", costs.state_dim(), data.state_dim()));
    }
    if data.input_dims() != costs.input_dims() {
        return Err(Error::dims(
            "dataset input dimensions",
            format!("{:?}", costs.input_dims()),
            format!("{:?}", data.input_dims()),
        ));
    }
    Ok(())
}

/// Builds `(Hᵢ, Ξᵢ)` for player `player` at the feedbacks `fb_k`.
pub fn assemble_initial_system(
    data: &IntegralDataset,
    costs: &CostSet,
    fb_k: &FeedbackSet,
    player: usize,
) -> Result<LeastSquaresSystem> {
    check_dataset(data, costs)?;
    let n = costs.state_dim();
    let dims = costs.input_dims();
    if player >= dims.len() {
        return Err(Error::InvalidArgument(format!("no player {player}")));
    }
    if fb_k.len() != dims.len() {
        return Err(Error::dims("feedback set", dims.len(), fb_k.len()));
    }
    for (j, f) in fb_k.gains().iter().enumerate() {
        ensure_shape(f, dims[j], n, &format!("F[{j}]"))?;
    }
    let s = data.rows();
    let required = data.data_bound();
    if s < required {
        return Err(Error::InsufficientData { rows: s, required });
    }

    let id = DMatrix::<f64>::identity(n, n);
    let i = player;
    let rii = &costs.r()[i][i];
    let mut blocks: Vec<DMatrix<f64>> = vec![data.delta_xx.clone()];
    let fi = &fb_k[i];
    blocks.push(
        (&data.i_xu[i] * id.kronecker(rii) + &data.i_xx * id.kronecker(&(fi.transpose() * rii))) * -2.0,
    );
    for (j, fj) in fb_k.gains().iter().enumerate() {
        if j != i {
            blocks.push((&data.i_xu[j] + &data.i_xx * id.kronecker(&fj.transpose())) * -2.0);
        }
    }
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut h = DMatrix::zeros(s, cols);
    let mut off = 0;
    for b in &blocks {
        h.view_mut((0, off), (s, b.ncols())).copy_from(b);
        off += b.ncols();
    }
    let mut w = costs.q()[i].clone();
    for (rij, fj) in costs.r()[i].iter().zip(fb_k.gains()) {
        w += fj.transpose() * rij * fj;
    }
    let xi = -(&data.i_xx * vec_of(&symmetrize(&w)));
    let (condition_estimate, _) = scaled_condition(&h);
    Ok(LeastSquaresSystem {
        h,
        xi,
        condition_estimate,
        player,
        state_dim: n,
        input_dims: dims,
    })
}

/// Solution of the initialized game from data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFreeInitial {
    pub values: ValueSet,
    pub feedback: FeedbackSet,
    /// `y[j][i] = Yⱼᵢ ≈ BⱼᵀKᵢ`, `None` on the diagonal.
    pub y: Vec<Vec<Option<DMatrix<f64>>>>,
    /// `Bᵢ = (RᵢᵢFᵢKᵢ⁻¹)ᵀ` from player `i`'s own system.
    pub b_est: Vec<DMatrix<f64>>,
    pub iterations: usize,
    /// Condition estimates of the final per-player systems.
    pub conditions: Vec<f64>,
}

/// Iterates the per-player data systems from `fb0` until every
/// `‖Kᵢ^(k+1) - Kᵢ^(k)‖_F < εᵢ`.
pub fn solve_initial_model_free(
    data: &IntegralDataset,
    costs: &CostSet,
    fb0: &FeedbackSet,
    eps: &[f64],
    max_iter: usize,
) -> Result<ModelFreeInitial> {
    let players = costs.players();
    let n = costs.state_dim();
    let dims = costs.input_dims();
    let eps: Vec<f64> = match eps.len() {
        1 => vec![eps[0]; players],
        l if l == players => eps.to_vec(),
        l => return Err(Error::dims("thresholds", players, l)),
    };
    if eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("thresholds must be positive".into()));
    }
    let mut fb = fb0.clone();
    let mut prev: Option<Vec<DMatrix<f64>>> = None;
    let mut last_change = f64::INFINITY;
    for k in 0..max_iter {
        let mut values = Vec::with_capacity(players);
        let mut gains = Vec::with_capacity(players);
        let mut y: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; players]; players];
        let mut conditions = Vec::with_capacity(players);
        for i in 0..players {
            let sys = assemble_initial_system(data, costs, &fb, i)?;
            conditions.push(sys.condition_estimate);
            let parts = sys.split(&sys.solve()?)?;
            values.push(smat_unpack(parts.k_hat.as_slice(), n)?);
            gains.push(unvec(parts.f_vec.as_slice(), dims[i], n));
            for (j, v) in parts.y_vec {
                y[j][i] = Some(unvec(v.as_slice(), dims[j], n));
            }
        }
        let done = match &prev {
            Some(p) => {
                last_change = 0.0;
                let mut all = true;
                for i in 0..players {
                    let change = (&values[i] - &p[i]).norm();
                    last_change = last_change.max(change);
                    if !(change < eps[i]) {
                        all = false;
                    }
                }
                all
            }
            None => false,
        };
        fb = FeedbackSet::new(gains);
        if done {
            let mut b_est = Vec::with_capacity(players);
            for (i, kv) in values.iter().enumerate() {
                ensure_positive_definite(kv, &format!("data-driven K[{i}]")).map_err(|e| {
                    Error::Inconsistent(format!("initialized solution is not positive definite: {e}"))
                })?;
                let kinv = inverse(kv, &format!("K[{i}]"))?;
                b_est.push((&costs.r()[i][i] * &fb[i] * kinv).transpose());
            }
            return Ok(ModelFreeInitial {
                values: ValueSet::new(values),
                feedback: fb,
                y,
                b_est,
                iterations: k + 1,
                conditions,
            });
        }
        prev = Some(values);
    }
    Err(Error::MaxIterations {
        iterations: max_iter,
        last_change,
    })
}

/// `Fᵢ⁰ (Kᵢ⁰)⁻¹`, which stands in for `Rᵢᵢ⁻¹Bᵢᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub feedback: FeedbackSet,
    pub values: ValueSet,
}

impl Anchor {
    pub fn gain_maps(&self) -> Result<Vec<DMatrix<f64>>> {
        self.feedback
            .gains()
            .iter()
            .zip(self.values.values())
            .enumerate()
            .map(|(i, (f, k))| Ok(f * inverse(k, &format!("anchor K[{i}]"))?))
            .collect()
    }
}

/// `Kᵢ ← Kᵢ - αᵢ(dᵢᵀMᵢ + Mᵢᵀdᵢ)`, `Fᵢ = MᵢKᵢ` with `Mᵢ = Fᵢ⁰(Kᵢ⁰)⁻¹`.
pub fn model_free_gradient_step(
    vals: &ValueSet,
    anchor: &Anchor,
    target: &FeedbackSet,
    alphas: &[f64],
) -> Result<(ValueSet, FeedbackSet)> {
    let maps = anchor.gain_maps()?;
    if vals.len() != maps.len() || target.len() != maps.len() {
        return Err(Error::dims("players", maps.len(), vals.len().min(target.len())));
    }
    let alphas: Vec<f64> = match alphas.len() {
        1 => vec![alphas[0]; maps.len()],
        l if l == maps.len() => alphas.to_vec(),
        l => return Err(Error::dims("learning rates", maps.len(), l)),
    };
    let mut next = Vec::with_capacity(maps.len());
    for (i, (k, map)) in vals.values().iter().zip(&maps).enumerate() {
        let gap = map * k - &target[i];
        next.push(symmetrize(&(k - gradient_with_map(map, &gap) * alphas[i])));
    }
    let next = ValueSet::new(next);
    let fb = FeedbackSet::new(maps.iter().zip(next.values()).map(|(m, k)| m * k).collect());
    Ok((next, fb))
}

/// Solves `I_qx Q̂ᵢ = Ωᵢ` with
/// `Ωᵢ = -I_xx Σⱼ vec(FⱼᵀRᵢⱼFⱼ) - δ_xx K̂ᵢ + 2 Σⱼ [I_xuⱼ vec(BⱼᵀKᵢ) + I_xx vec(FⱼᵀBⱼᵀKᵢ)]`.
pub fn model_free_q_evaluation(
    data: &IntegralDataset,
    vals: &ValueSet,
    fb: &FeedbackSet,
    b_est: &[DMatrix<f64>],
    r: &[Vec<DMatrix<f64>>],
) -> Result<Vec<DMatrix<f64>>> {
    data.validate()?;
    let n = data.state_dim();
    let players = data.input_dims().len();
    if vals.len() != players || fb.len() != players || b_est.len() != players || r.len() != players {
        return Err(Error::dims("players", players, vals.len()));
    }
    if data.rows() < packed_len(n) {
        return Err(Error::InsufficientData {
            rows: data.rows(),
            required: packed_len(n),
        });
    }
    let mut out = Vec::with_capacity(players);
    for i in 0..players {
        let k = &vals[i];
        let mut omega = -(&data.delta_xx * smat_pack(k)?);
        let mut cost = DMatrix::zeros(n, n);
        for j in 0..players {
            cost += fb[j].transpose() * &r[i][j] * &fb[j];
            let btk = b_est[j].transpose() * k;
            omega += (&data.i_xu[j] * vec_of(&btk) + &data.i_xx * vec_of(&(fb[j].transpose() * &btk))) * 2.0;
        }
        omega -= &data.i_xx * vec_of(&cost);
        let q_hat = lstsq(&data.i_qx, &omega, "state-weight data system")?;
        out.push(smat_unpack(q_hat.as_slice(), n)?);
    }
    Ok(out)
}

/// Data-driven synthesis from a prepared dataset and target `F̂`.
///
/// `monitor` is used only to report the closed-loop spectral abscissa in the
/// trace; it never enters the computation.
pub fn run_algorithm2(
    data: &IntegralDataset,
    target: &FeedbackSet,
    costs: &CostSet,
    config: &Algorithm1Config,
    monitor: Option<&Dynamics>,
) -> Result<SynthesizedGame> {
    let players = costs.players();
    config.validate(players)?;
    let start = solve_initial_model_free(data, costs, target, &config.eps, config.max_lyapunov_iter)?;
    let anchor = Anchor {
        feedback: start.feedback.clone(),
        values: start.values.clone(),
    };
    let maps = anchor.gain_maps()?;
    let abscissa = |fb: &FeedbackSet| -> Result<Option<f64>> {
        match monitor {
            Some(d) => Ok(Some(spectral_abscissa(&closed_loop_matrix(d, fb)?)?)),
            None => Ok(None),
        }
    };
    let q_of = |vals: &ValueSet| {
        let fb = FeedbackSet::new(maps.iter().zip(vals.values()).map(|(m, k)| m * k).collect());
        model_free_q_evaluation(data, vals, &fb, &start.b_est, costs.r())
    };
    let mut out = descent_loop(&start.values, &maps, target, config, &abscissa, &q_of)?;
    out.trace.ls_conditions = start.conditions.clone();
    let q_star = model_free_q_evaluation(data, &out.values, &out.feedback, &start.b_est, costs.r())?;
    Ok(SynthesizedGame {
        q_star,
        r: costs.r().to_vec(),
        k_star: out.values,
        f_star: out.feedback,
        target: target.clone(),
        initial_values: start.values,
        initial_feedback: start.feedback,
        b: start.b_est,
        trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Full pipeline from logs: `F̂` from the demonstration samples, integral data
/// from the probing log over `boundaries`, then [`run_algorithm2`]. The two
/// logs may be the same when the demonstration itself carries decaying noise.
pub fn run_algorithm2_from_logs(
    demo: &TrajectoryLog,
    sample_indices: &[usize],
    probe: &TrajectoryLog,
    boundaries: &[f64],
    costs: &CostSet,
    config: &Algorithm1Config,
    monitor: Option<&Dynamics>,
) -> Result<SynthesizedGame> {
    let target = estimate_feedback(demo, sample_indices)?;
    let data = build_integral_dataset(probe, boundaries)?;
    if !data.satisfies_data_bound() {
        return Err(Error::InsufficientData {
            rows: data.rows(),
            required: data.data_bound(),
        });
    }
    run_algorithm2(&data, &target, costs, config, monitor)
}

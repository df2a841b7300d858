//! Inverse game synthesis with known dynamics.
//!
//! Starting from the solution of an initialized game, each value matrix is
//! moved along the gradient of `Dᵢ = tr(dᵢᵀdᵢ)`, `dᵢ = Fᵢ - F̂ᵢ`, while `R`
//! stays fixed. The state weights are then read off the Riccati equations.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    check_values, closed_loop_matrix, effective_weight, feedback_from_value, lyapunov_iterations,
    Dynamics, FeedbackSet, GameSpec, LyapunovOptions, ValueSet,
};
use crate::linalg::{spd_solve, spectral_abscissa, symmetrize};
use crate::trajectory::{estimate_feedback, fmt17, TrajectoryLog};

/// Backtracking halves the step at most this many times.
pub const MAX_HALVINGS: usize = 30;
/// Abort when some `Dᵢ` grows beyond this multiple of its initial value.
pub const OVERSHOOT_FACTOR: f64 = 1e6;

/// Per-player gap `dᵢ = Fᵢ - F̂ᵢ` and objective `Dᵢ = tr(dᵢᵀdᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapState {
    pub d: Vec<DMatrix<f64>>,
    pub objective: Vec<f64>,
}

impl GapState {
    pub fn norms(&self) -> Vec<f64> {
        self.d.iter().map(|d| d.norm()).collect()
    }
}

pub fn feedback_gap(current: &FeedbackSet, target: &FeedbackSet) -> Result<GapState> {
    if current.len() != target.len() {
        return Err(Error::dims("target feedback set", current.len(), target.len()));
    }
    let mut d = Vec::with_capacity(current.len());
    for (i, (f, t)) in current.gains().iter().zip(target.gains()).enumerate() {
        if f.shape() != t.shape() {
            return Err(Error::dims(
                format!("target F[{i}]"),
                format!("{}x{}", f.nrows(), f.ncols()),
                format!("{}x{}", t.nrows(), t.ncols()),
            ));
        }
        d.push(f - t);
    }
    let objective = d.iter().map(|x| x.norm_squared()).collect();
    Ok(GapState { d, objective })
}

/// `gᵢ = dᵢᵀ Rᵢᵢ⁻¹ Bᵢᵀ + Bᵢ Rᵢᵢ⁻¹ dᵢ`, the gradient of `Dᵢ` over symmetric `Kᵢ`.
pub fn gap_gradient(spec: &GameSpec, gap_i: &DMatrix<f64>, player: usize) -> Result<DMatrix<f64>> {
    if player >= spec.players() {
        return Err(Error::InvalidArgument(format!("no player {player}")));
    }
    Ok(gradient_with_map(&gain_map(spec, player)?, gap_i))
}

/// `Mᵢ = Rᵢᵢ⁻¹Bᵢᵀ` so that `Fᵢ = MᵢKᵢ`.
pub(crate) fn gain_map(spec: &GameSpec, player: usize) -> Result<DMatrix<f64>> {
    let b = &spec.dynamics().b()[player];
    spd_solve(
        &spec.r()[player][player],
        &b.transpose(),
        &format!("R[{player}][{player}]"),
    )
}

pub(crate) fn gradient_with_map(map: &DMatrix<f64>, gap: &DMatrix<f64>) -> DMatrix<f64> {
    let g = gap.transpose() * map;
    &g + g.transpose()
}

/// When to evaluate the state weights during the descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QUpdateMode {
    EveryStep,
    #[default]
    OnceAtEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Algorithm1Config {
    /// `αᵢ`; a single entry applies to all players.
    pub learning_rates: Vec<f64>,
    /// Stop once every `Dᵢ < δᵢ`.
    pub delta: Vec<f64>,
    /// Thresholds of the initial Lyapunov iterations.
    pub eps: Vec<f64>,
    pub max_outer: usize,
    pub max_lyapunov_iter: usize,
    pub q_update_mode: QUpdateMode,
    pub line_search: bool,
    /// Keep `K` (and `Q` in every-step mode) snapshots every this many
    /// iterations; 0 keeps none.
    pub snapshot_every: usize,
}

impl Default for Algorithm1Config {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.1],
            delta: vec![1e-8],
            eps: vec![1e-9],
            max_outer: 50_000,
            max_lyapunov_iter: 500,
            q_update_mode: QUpdateMode::OnceAtEnd,
            line_search: false,
            snapshot_every: 0,
        }
    }
}

fn per_player(values: &[f64], players: usize, what: &str) -> Result<Vec<f64>> {
    let out = match values.len() {
        1 => vec![values[0]; players],
        l if l == players => values.to_vec(),
        l => return Err(Error::dims(what, players, l)),
    };
    if out.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} must be positive")));
    }
    Ok(out)
}

impl Algorithm1Config {
    pub fn validate(&self, players: usize) -> Result<()> {
        self.alphas(players)?;
        self.deltas(players)?;
        self.lyapunov_options(players)?;
        if self.max_outer == 0 {
            return Err(Error::InvalidArgument("max_outer must be positive".into()));
        }
        Ok(())
    }

    pub fn alphas(&self, players: usize) -> Result<Vec<f64>> {
        per_player(&self.learning_rates, players, "learning rates")
    }

    pub fn deltas(&self, players: usize) -> Result<Vec<f64>> {
        per_player(&self.delta, players, "stop thresholds")
    }

    pub fn lyapunov_options(&self, players: usize) -> Result<LyapunovOptions> {
        let opts = LyapunovOptions {
            eps: self.eps.clone(),
            max_iter: self.max_lyapunov_iter,
            enforce_admissibility: true,
        };
        opts.validate(players)?;
        Ok(opts)
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub p: usize,
    pub objective: Vec<f64>,
    pub gap_norm: Vec<f64>,
    /// `None` when the dynamics are not available to the solver.
    pub spectral_abscissa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub p: usize,
    pub k: Vec<DMatrix<f64>>,
    pub q: Option<Vec<DMatrix<f64>>>,
}

/// One record per outer iteration: iteration `p` evaluates the gap of the
/// current iterate and, unless it is the last one, takes a step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Condition estimates of the least-squares systems, per player.
    pub ls_conditions: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Header `p,D_1..D_N,gapnorm_1..gapnorm_N,spectral_abscissa[,cond_1..]`.
    /// `every > 1` keeps every `every`-th row plus the last one.
    pub fn write_csv<W: Write>(&self, writer: W, every: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let players = self.records.first().map_or(0, |r| r.objective.len());
        let mut header = vec!["p".to_string()];
        header.extend((1..=players).map(|i| format!("D_{i}")));
        header.extend((1..=players).map(|i| format!("gapnorm_{i}")));
        header.push("spectral_abscissa".into());
        header.extend((1..=self.ls_conditions.len()).map(|i| format!("cond_{i}")));
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        let every = every.max(1);
        let last = self.records.len().saturating_sub(1);
        for (idx, rec) in self.records.iter().enumerate() {
            if idx % every != 0 && idx != last {
                continue;
            }
            let mut row = vec![rec.p.to_string()];
            row.extend(rec.objective.iter().map(|v| fmt17(*v)));
            row.extend(rec.gap_norm.iter().map(|v| fmt17(*v)));
            row.push(rec.spectral_abscissa.map(fmt17).unwrap_or_default());
            row.extend(self.ls_conditions.iter().map(|v| fmt17(*v)));
            w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Output of either inverse algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedGame {
    pub q_star: Vec<DMatrix<f64>>,
    pub r: Vec<Vec<DMatrix<f64>>>,
    pub k_star: ValueSet,
    pub f_star: FeedbackSet,
    /// The feedback laws the run was matching.
    pub target: FeedbackSet,
    /// Solution of the initialized game the descent started from.
    pub initial_values: ValueSet,
    pub initial_feedback: FeedbackSet,
    /// Input matrices the run worked with (known or recovered).
    pub b: Vec<DMatrix<f64>>,
    pub trace: ConvergenceTrace,
    pub converged: bool,
    /// Gradient steps taken.
    pub iterations: usize,
}

impl SynthesizedGame {
    /// The synthesized game over the given dynamics.
    pub fn game(&self, dynamics: &Dynamics) -> Result<GameSpec> {
        GameSpec::new(dynamics.clone(), self.q_star.clone(), self.r.clone())
    }
}

/// `Qᵢ = -AᵀKᵢ - KᵢA - Σⱼ FⱼᵀRᵢⱼFⱼ + SᵀKᵢ + KᵢS` with `Fⱼ = Rⱼⱼ⁻¹BⱼᵀKⱼ`,
/// `S = Σⱼ BⱼFⱼ`. The `Q` of `spec` is ignored.
pub fn inverse_q_update(spec: &GameSpec, vals: &ValueSet) -> Result<Vec<DMatrix<f64>>> {
    check_values(spec.dynamics(), vals)?;
    let fb = feedback_from_value(spec, vals)?;
    let acl = closed_loop_matrix(spec.dynamics(), &fb)?;
    let n = spec.state_dim();
    Ok(vals
        .values()
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let w = effective_weight(&DMatrix::zeros(n, n), &spec.r()[i], &fb);
            symmetrize(&(-(acl.transpose() * k) - k * &acl - w))
        })
        .collect())
}

/// Descent on one player's objective `D(K) = ‖MK - F̂‖²_F`. Returns the new
/// value matrix and its objective.
pub(crate) fn descend(
    k: &DMatrix<f64>,
    map: &DMatrix<f64>,
    target: &DMatrix<f64>,
    alpha: f64,
    line_search: bool,
    player: usize,
    iteration: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let gap = map * k - target;
    let current = gap.norm_squared();
    if current == 0.0 {
        return Ok((k.clone(), 0.0));
    }
    let g = gradient_with_map(map, &gap);
    let trial = |a: f64| {
        let next = symmetrize(&(k - &g * a));
        let d = (map * &next - target).norm_squared();
        (next, d)
    };
    if !line_search {
        return Ok(trial(alpha));
    }
    let mut a = alpha;
    for _ in 0..=MAX_HALVINGS {
        let (next, d) = trial(a);
        if d < current {
            return Ok((next, d));
        }
        a *= 0.5;
    }
    Err(Error::LineSearchStall {
        player,
        iteration,
        objective: current,
    })
}

/// One gradient step for every player, `Kᵢ ← Kᵢ - αᵢgᵢ`, `Fᵢ = Rᵢᵢ⁻¹BᵢᵀKᵢ`.
/// Returns the gap after the step.
pub fn gradient_step(
    spec: &GameSpec,
    vals: &ValueSet,
    target: &FeedbackSet,
    config: &Algorithm1Config,
) -> Result<(ValueSet, FeedbackSet, GapState)> {
    check_values(spec.dynamics(), vals)?;
    target.check_against(spec.dynamics())?;
    let alphas = config.alphas(spec.players())?;
    let maps = (0..spec.players())
        .map(|i| gain_map(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let active = vec![true; spec.players()];
    let next = step_all(vals, &maps, target, &alphas, config.line_search, &active, 0)?;
    let fb = feedback_from_value(spec, &next)?;
    let gap = feedback_gap(&fb, target)?;
    Ok((next, fb, gap))
}

pub(crate) fn step_all(
    vals: &ValueSet,
    maps: &[DMatrix<f64>],
    target: &FeedbackSet,
    alphas: &[f64],
    line_search: bool,
    active: &[bool],
    iteration: usize,
) -> Result<ValueSet> {
    let mut next = Vec::with_capacity(vals.len());
    for (i, k) in vals.values().iter().enumerate() {
        if active[i] {
            let (k_new, _) = descend(k, &maps[i], &target[i], alphas[i], line_search, i, iteration)?;
            next.push(k_new);
        } else {
            next.push(k.clone());
        }
    }
    Ok(ValueSet::new(next))
}

/// Descent loop shared by both inverse algorithms. `abscissa` reports the
/// closed-loop spectral abscissa of a feedback set when dynamics are known;
/// `q_of` evaluates state weights for snapshots.
pub(crate) struct DescentOutcome {
    pub values: ValueSet,
    pub feedback: FeedbackSet,
    pub trace: ConvergenceTrace,
    pub converged: bool,
    pub iterations: usize,
}

pub(crate) fn descent_loop(
    initial: &ValueSet,
    maps: &[DMatrix<f64>],
    target: &FeedbackSet,
    config: &Algorithm1Config,
    abscissa: &dyn Fn(&FeedbackSet) -> Result<Option<f64>>,
    q_of: &dyn Fn(&ValueSet) -> Result<Vec<DMatrix<f64>>>,
) -> Result<DescentOutcome> {
    let players = maps.len();
    let alphas = config.alphas(players)?;
    let deltas = config.deltas(players)?;
    let feedback_of = |vals: &ValueSet| {
        FeedbackSet::new(maps.iter().zip(vals.values()).map(|(m, k)| m * k).collect())
    };

    let mut vals = initial.clone();
    let mut fb = feedback_of(&vals);
    let mut trace = ConvergenceTrace::default();
    let mut initial_objective: Option<Vec<f64>> = None;
    let mut p = 0usize;
    loop {
        let gap = feedback_gap(&fb, target)?;
        if gap.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("feedback gap at iteration {p}"),
            });
        }
        let d0 = initial_objective.get_or_insert_with(|| gap.objective.clone());
        for (i, (&now, &start)) in gap.objective.iter().zip(d0.iter()).enumerate() {
            if start > 0.0 && now > OVERSHOOT_FACTOR * start {
                return Err(Error::Overshoot {
                    player: i,
                    iteration: p,
                    ratio: now / start,
                });
            }
        }
        trace.records.push(TraceRecord {
            p,
            objective: gap.objective.clone(),
            gap_norm: gap.norms(),
            spectral_abscissa: abscissa(&fb)?,
        });
        if config.snapshot_every > 0 && p % config.snapshot_every == 0 {
            trace.snapshots.push(Snapshot {
                p,
                k: vals.values().to_vec(),
                q: match config.q_update_mode {
                    QUpdateMode::EveryStep => Some(q_of(&vals)?),
                    QUpdateMode::OnceAtEnd => None,
                },
            });
        }
        let active: Vec<bool> = gap
            .objective
            .iter()
            .zip(&deltas)
            .map(|(d, delta)| d >= delta)
            .collect();
        if active.iter().all(|a| !a) {
            return Ok(DescentOutcome {
                values: vals,
                feedback: fb,
                trace,
                converged: true,
                iterations: p,
            });
        }
        if p >= config.max_outer {
            log::warn!("descent stopped after {p} iterations without meeting the thresholds");
            return Ok(DescentOutcome {
                values: vals,
                feedback: fb,
                trace,
                converged: false,
                iterations: p,
            });
        }
        vals = step_all(&vals, maps, target, &alphas, config.line_search, &active, p)?;
        fb = feedback_of(&vals);
        p += 1;
    }
}

/// Runs the inverse synthesis against a known target feedback set: solve the
/// initialized game seeded at the target, then descend.
pub fn run_algorithm1_with_target(
    initial: &GameSpec,
    target: &FeedbackSet,
    config: &Algorithm1Config,
) -> Result<SynthesizedGame> {
    let players = initial.players();
    config.validate(players)?;
    target.check_against(initial.dynamics())?;
    let start = lyapunov_iterations(initial, target, &config.lyapunov_options(players)?)?;
    let maps = (0..players)
        .map(|i| gain_map(initial, i))
        .collect::<Result<Vec<_>>>()?;
    let dynamics = initial.dynamics();
    let abscissa = |fb: &FeedbackSet| -> Result<Option<f64>> {
        Ok(Some(spectral_abscissa(&closed_loop_matrix(dynamics, fb)?)?))
    };
    let q_of = |vals: &ValueSet| inverse_q_update(initial, vals);
    let out = descent_loop(&start.values, &maps, target, config, &abscissa, &q_of)?;
    let q_star = inverse_q_update(initial, &out.values)?;
    Ok(SynthesizedGame {
        q_star,
        r: initial.r().to_vec(),
        k_star: out.values,
        f_star: out.feedback,
        target: target.clone(),
        initial_values: start.values,
        initial_feedback: start.feedback,
        b: dynamics.b().to_vec(),
        trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Full model-based pipeline: estimate `F̂` from the demonstration samples,
/// then [`run_algorithm1_with_target`].
pub fn run_algorithm1(
    initial: &GameSpec,
    log: &TrajectoryLog,
    sample_indices: &[usize],
    config: &Algorithm1Config,
) -> Result<SynthesizedGame> {
    let target = estimate_feedback(log, sample_indices)?;
    run_algorithm1_with_target(initial, &target, config)
}

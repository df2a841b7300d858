//! Demonstration data: closed-loop simulation with optional probing noise,
//! batch least-squares feedback estimation and the interval integrals used
//! by the model-free solver.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{closed_loop_matrix, is_stabilizing, Dynamics, FeedbackSet};
use crate::linalg::spectral_abscissa;
use crate::model_free::{packed_len, state_quad_pack};

/// Gram-matrix condition number above which feedback estimation is refused.
pub const ESTIMATION_CONDITION_LIMIT: f64 = 1e12;

/// Sum-of-sinusoids probing noise `a · Σₖ sin(cₖ t) · e^{-λt}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub amplitude: f64,
    pub component_count: usize,
    /// Frequencies `cₖ` are drawn uniformly from this interval (rad/s).
    pub frequency_range: [f64; 2],
    pub seed: u64,
    #[serde(default)]
    pub decay_rate: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument("noise amplitude must be finite and >= 0".into()));
        }
        if self.component_count == 0 {
            return Err(Error::InvalidArgument("noise needs at least one component".into()));
        }
        let [lo, hi] = self.frequency_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument("invalid noise frequency range".into()));
        }
        if !(self.decay_rate >= 0.0) {
            return Err(Error::InvalidArgument("noise decay rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frequencies drawn once per input channel. Channel `(i, c)` uses its own
/// ChaCha stream derived from `(seed, i, c)`, so adding players never
/// changes the signal of existing ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingSignal {
    amplitude: f64,
    decay_rate: f64,
    frequencies: Vec<Vec<Vec<f64>>>,
}

impl ProbingSignal {
    pub fn new(noise: &NoiseSpec, input_dims: &[usize]) -> Result<Self> {
        noise.validate()?;
        let [lo, hi] = noise.frequency_range;
        let frequencies = input_dims
            .iter()
            .enumerate()
            .map(|(player, &m)| {
                (0..m)
                    .map(|channel| {
                        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
                        rng.set_stream(((player as u64) << 32) | channel as u64);
                        (0..noise.component_count)
                            .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            amplitude: noise.amplitude,
            decay_rate: noise.decay_rate,
            frequencies,
        })
    }

    /// Noise vector `ωᵢ(t)` for every player.
    pub fn value(&self, t: f64) -> Vec<DVector<f64>> {
        let envelope = self.amplitude * (-self.decay_rate * t).exp();
        self.frequencies
            .iter()
            .map(|channels| {
                DVector::from_iterator(
                    channels.len(),
                    channels
                        .iter()
                        .map(|cs| envelope * cs.iter().map(|c| (c * t).sin()).sum::<f64>()),
                )
            })
            .collect()
    }

    pub fn frequencies(&self) -> &[Vec<Vec<f64>>] {
        &self.frequencies
    }
}

/// One-shot evaluation of the probing noise at time `t`.
pub fn probing_signal(noise: &NoiseSpec, input_dims: &[usize], t: f64) -> Result<Vec<DVector<f64>>> {
    Ok(ProbingSignal::new(noise, input_dims)?.value(t))
}

/// Time-stamped state and input samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    /// `inputs[player][sample]`.
    inputs: Vec<Vec<DVector<f64>>>,
    noise: Option<NoiseSpec>,
    diverged: bool,
}

impl TrajectoryLog {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        inputs: Vec<Vec<DVector<f64>>>,
        noise: Option<NoiseSpec>,
    ) -> Result<Self> {
        let len = times.len();
        if states.len() != len {
            return Err(Error::dims("trajectory states", len, states.len()));
        }
        for (i, per_player) in inputs.iter().enumerate() {
            if per_player.len() != len {
                return Err(Error::dims(format!("trajectory inputs of player {i}"), len, per_player.len()));
            }
            if let Some(first) = per_player.first() {
                if per_player.iter().any(|u| u.len() != first.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "inconsistent input dimension for player {i}"
                    )));
                }
            }
        }
        if let Some(first) = states.first() {
            if states.iter().any(|x| x.len() != first.len()) {
                return Err(Error::InvalidArgument("inconsistent state dimension".into()));
            }
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("sample times must be strictly increasing".into()));
        }
        Ok(Self {
            times,
            states,
            inputs,
            noise,
            diverged: false,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[Vec<DVector<f64>>] {
        &self.inputs
    }

    pub fn noise(&self) -> Option<&NoiseSpec> {
        self.noise.as_ref()
    }

    /// Set when the simulation hit a non-finite state and the log was cut short.
    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn players(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.inputs
            .iter()
            .map(|u| u.first().map_or(0, |v| v.len()))
            .collect()
    }

    /// Index of the sample closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.times.len() => self.times.len() - 1,
            Err(i) => {
                if (t - self.times[i - 1]) <= (self.times[i] - t) {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Header `t,x1..xn,u1_1..`; every value printed with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.state_dim()).map(|k| format!("x{k}")));
        for (i, m) in self.input_dims().iter().enumerate() {
            header.extend((1..=*m).map(|k| format!("u{}_{k}", i + 1)));
        }
        w.write_record(&header).map_err(csv_err)?;
        for s in 0..self.len() {
            let mut row = vec![fmt17(self.times[s])];
            row.extend(self.states[s].iter().map(|v| fmt17(*v)));
            for per_player in &self.inputs {
                row.extend(per_player[s].iter().map(|v| fmt17(*v)));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Parse("first column must be `t`".into()));
        }
        let mut n = 0;
        let mut dims: Vec<usize> = Vec::new();
        for name in header.iter().skip(1) {
            if let Some(rest) = name.strip_prefix('x') {
                if !dims.is_empty() || rest.parse::<usize>() != Ok(n + 1) {
                    return Err(Error::Parse(format!("unexpected column `{name}`")));
                }
                n += 1;
            } else if let Some(rest) = name.strip_prefix('u') {
                let (player, channel) = rest
                    .split_once('_')
                    .and_then(|(p, c)| Some((p.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::Parse(format!("bad input column `{name}`")))?;
                if player == dims.len() + 1 && channel == 1 {
                    dims.push(1);
                } else if player == dims.len() && channel == dims[player - 1] + 1 {
                    dims[player - 1] += 1;
                } else {
                    return Err(Error::Parse(format!("unexpected column `{name}`")));
                }
            } else {
                return Err(Error::Parse(format!("unexpected column `{name}`")));
            }
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs: Vec<Vec<DVector<f64>>> = vec![Vec::new(); dims.len()];
        for record in r.records() {
            let record = record.map_err(csv_err)?;
            let vals = record
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != header.len() {
                return Err(Error::Parse("ragged CSV row".into()));
            }
            times.push(vals[0]);
            states.push(DVector::from_column_slice(&vals[1..1 + n]));
            let mut off = 1 + n;
            for (i, m) in dims.iter().enumerate() {
                inputs[i].push(DVector::from_column_slice(&vals[off..off + m]));
                off += m;
            }
        }
        Self::new(times, states, inputs, None)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Fixed-step RK4 simulation of `ẋ = Ax + Σ Bᵢuᵢ` under
/// `uᵢ(t) = -Fᵢx(t) + ωᵢ(t)`. The logged inputs are the ones actually applied.
///
/// A non-finite state truncates the log and sets [`TrajectoryLog::diverged`].
pub fn simulate_closed_loop(
    dynamics: &Dynamics,
    fb: &FeedbackSet,
    x0: &DVector<f64>,
    step: f64,
    horizon: f64,
    noise: Option<&NoiseSpec>,
) -> Result<TrajectoryLog> {
    fb.check_against(dynamics)?;
    let n = dynamics.state_dim();
    if x0.len() != n {
        return Err(Error::dims("initial state", n, x0.len()));
    }
    if !(step > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("step and horizon must be positive".into()));
    }
    let steps = (horizon / step).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidArgument("horizon shorter than one step".into()));
    }
    let signal = noise
        .map(|ns| ProbingSignal::new(ns, &dynamics.input_dims()))
        .transpose()?;
    if noise.is_none() {
        let acl = closed_loop_matrix(dynamics, fb)?;
        if !is_stabilizing(&acl, 0.0)? {
            log::warn!(
                "simulating a non-stabilizing feedback (spectral abscissa {:.4})",
                spectral_abscissa(&acl)?
            );
        }
    }

    let inputs_at = |t: f64, x: &DVector<f64>| -> Vec<DVector<f64>> {
        let noise = signal.as_ref().map(|s| s.value(t));
        fb.gains()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let u = -(f * x);
                match &noise {
                    Some(w) => u + &w[i],
                    None => u,
                }
            })
            .collect()
    };
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let mut dx = dynamics.a() * x;
        for (b, u) in dynamics.b().iter().zip(inputs_at(t, x)) {
            dx += b * u;
        }
        dx
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(steps + 1); dynamics.players()];
    let mut record = |t: f64, x: &DVector<f64>, times: &mut Vec<f64>, states: &mut Vec<DVector<f64>>| {
        times.push(t);
        states.push(x.clone());
        for (i, u) in inputs_at(t, x).into_iter().enumerate() {
            inputs[i].push(u);
        }
    };

    let mut x = x0.clone();
    record(0.0, &x, &mut times, &mut states);
    let mut diverged = false;
    for k in 0..steps {
        let t = k as f64 * step;
        let k1 = rhs(t, &x);
        let k2 = rhs(t + 0.5 * step, &(&x + &k1 * (0.5 * step)));
        let k3 = rhs(t + 0.5 * step, &(&x + &k2 * (0.5 * step)));
        let k4 = rhs(t + step, &(&x + &k3 * step));
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            log::warn!("simulation diverged at t = {:.6}", t + step);
            diverged = true;
            break;
        }
        x = next;
        record((k + 1) as f64 * step, &x, &mut times, &mut states);
    }
    drop(record);
    let mut log = TrajectoryLog::new(times, states, inputs, noise.cloned())?;
    log.diverged = diverged;
    Ok(log)
}

/// Sample indices nearest to `t₀, t₀ + Δ, …` over the whole log.
pub fn sample_indices_every(log: &TrajectoryLog, interval: f64) -> Result<Vec<usize>> {
    if !(interval > 0.0) {
        return Err(Error::InvalidArgument("sampling interval must be positive".into()));
    }
    let Some(&t0) = log.times().first() else {
        return Ok(Vec::new());
    };
    let t_end = *log.times().last().unwrap();
    let mut out: Vec<usize> = Vec::new();
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * interval;
        if t > t_end + 1e-9 * interval {
            break;
        }
        let idx = log.nearest_index(t);
        if out.last() != Some(&idx) {
            out.push(idx);
        }
        k += 1;
    }
    Ok(out)
}

/// Evenly spaced boundaries `t₀ + l·T`, `l = 0..=count`.
pub fn uniform_boundaries(start: f64, interval: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|l| start + l as f64 * interval).collect()
}

/// Batch least squares `F̂ᵢ = -ûᵢ x̂ᵀ (x̂ x̂ᵀ)⁻¹` over the selected samples.
pub fn estimate_feedback(log: &TrajectoryLog, sample_indices: &[usize]) -> Result<FeedbackSet> {
    let n = log.state_dim();
    let s = sample_indices.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if s < n {
        return Err(Error::InsufficientData { rows: s, required: n });
    }
    if let Some(&bad) = sample_indices.iter().find(|&&i| i >= log.len()) {
        return Err(Error::InvalidArgument(format!("sample index {bad} out of range")));
    }
    // rows are samples
    let xt = DMatrix::from_fn(s, n, |r, c| log.states()[sample_indices[r]][c]);
    let gram = xt.transpose() * &xt;
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= ESTIMATION_CONDITION_LIMIT) {
        let rank = eig.iter().filter(|&&v| v > hi * 1e-12).count();
        return Err(Error::RankDeficient {
            what: format!("state sample Gram matrix has numerical rank {rank} < {n}"),
            condition,
        });
    }
    let qr = xt.qr();
    let q = qr.q();
    let r = qr.r();
    let mut gains = Vec::with_capacity(log.players());
    for per_player in log.inputs() {
        let m = per_player.first().map_or(0, |u| u.len());
        let ut = DMatrix::from_fn(s, m, |row, c| per_player[sample_indices[row]][c]);
        let sol = r
            .solve_upper_triangular(&(q.transpose() * ut))
            .ok_or_else(|| Error::Singular {
                what: "state sample matrix".into(),
            })?;
        gains.push(-sol.transpose());
    }
    Ok(FeedbackSet::new(gains))
}

/// Interval integrals of the demonstration, one row per interval
/// `[t_{l-1}, t_l]`:
///
/// * `delta_xx`: `x̂(t_l) - x̂(t_{l-1})`
/// * `i_xx`: `∫ x⊗x`
/// * `i_xu[i]`: `∫ x⊗uᵢ`
/// * `i_qx`: `∫ x̂`
///
/// where `x̂` is the quadratic monomial vector of [`state_quad_pack`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralDataset {
    pub delta_xx: DMatrix<f64>,
    pub i_xx: DMatrix<f64>,
    pub i_xu: Vec<DMatrix<f64>>,
    pub i_qx: DMatrix<f64>,
    pub interval_boundaries: Vec<f64>,
}

impl IntegralDataset {
    pub fn rows(&self) -> usize {
        self.delta_xx.nrows()
    }

    pub fn state_dim(&self) -> usize {
        (self.i_xx.ncols() as f64).sqrt().round() as usize
    }

    pub fn input_dims(&self) -> Vec<usize> {
        let n = self.state_dim().max(1);
        self.i_xu.iter().map(|m| m.ncols() / n).collect()
    }

    /// Unknown count of player `player`'s least-squares system:
    /// `n(n+1)/2 + mᵢn + Σ_{j≠i} mⱼn`, i.e. `n(n+1)/2 + n Σⱼ mⱼ`.
    pub fn data_bound(&self) -> usize {
        let n = self.state_dim();
        packed_len(n) + n * self.input_dims().iter().sum::<usize>()
    }

    pub fn satisfies_data_bound(&self) -> bool {
        self.rows() >= self.data_bound()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let s = self.rows();
        let n = self.state_dim();
        if n * n != self.i_xx.ncols() || self.delta_xx.ncols() != packed_len(n) || self.i_qx.ncols() != packed_len(n) {
            return Err(Error::InvalidArgument("inconsistent integral dataset column counts".into()));
        }
        if self.i_xx.nrows() != s || self.i_qx.nrows() != s || self.i_xu.iter().any(|m| m.nrows() != s) {
            return Err(Error::InvalidArgument("inconsistent integral dataset row counts".into()));
        }
        Ok(())
    }

    /// Header `t_start,t_end,dxx_*,ixx_*,ixu{i}_*,iqx_*`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t_start".to_string(), "t_end".to_string()];
        header.extend((1..=self.delta_xx.ncols()).map(|k| format!("dxx_{k}")));
        header.extend((1..=self.i_xx.ncols()).map(|k| format!("ixx_{k}")));
        for (i, m) in self.i_xu.iter().enumerate() {
            header.extend((1..=m.ncols()).map(|k| format!("ixu{}_{k}", i + 1)));
        }
        header.extend((1..=self.i_qx.ncols()).map(|k| format!("iqx_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for l in 0..self.rows() {
            let mut row = vec![
                fmt17(self.interval_boundaries[l]),
                fmt17(self.interval_boundaries[l + 1]),
            ];
            row.extend(self.delta_xx.row(l).iter().map(|v| fmt17(*v)));
            row.extend(self.i_xx.row(l).iter().map(|v| fmt17(*v)));
            for m in &self.i_xu {
                row.extend(m.row(l).iter().map(|v| fmt17(*v)));
            }
            row.extend(self.i_qx.row(l).iter().map(|v| fmt17(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Builds the interval integrals by composite trapezoid over the log samples.
/// Boundaries are snapped to the nearest sample time.
pub fn build_integral_dataset(log: &TrajectoryLog, boundaries: &[f64]) -> Result<IntegralDataset> {
    if boundaries.len() < 2 {
        return Err(Error::InsufficientData {
            rows: boundaries.len().saturating_sub(1),
            required: 1,
        });
    }
    let idx: Vec<usize> = boundaries.iter().map(|&t| log.nearest_index(t)).collect();
    for (l, w) in idx.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::EmptyInterval { interval: l });
        }
    }
    let n = log.state_dim();
    let nq = packed_len(n);
    let dims = log.input_dims();
    let s = idx.len() - 1;
    let mut delta_xx = DMatrix::zeros(s, nq);
    let mut i_xx = DMatrix::zeros(s, n * n);
    let mut i_xu: Vec<DMatrix<f64>> = dims.iter().map(|m| DMatrix::zeros(s, n * m)).collect();
    let mut i_qx = DMatrix::zeros(s, nq);

    let states = log.states();
    let times = log.times();
    for l in 0..s {
        let (a, b) = (idx[l], idx[l + 1]);
        let dq = state_quad_pack(&states[b]) - state_quad_pack(&states[a]);
        delta_xx.row_mut(l).copy_from(&dq.transpose());
        for p in a..b {
            let h = 0.5 * (times[p + 1] - times[p]);
            for q in [p, p + 1] {
                let x = &states[q];
                let xx = x.kronecker(x);
                let mut row = i_xx.row_mut(l);
                row += xx.transpose() * h;
                let mut row = i_qx.row_mut(l);
                row += state_quad_pack(x).transpose() * h;
                for (i, per_player) in log.inputs().iter().enumerate() {
                    let xu = x.kronecker(&per_player[q]);
                    let mut row = i_xu[i].row_mut(l);
                    row += xu.transpose() * h;
                }
            }
        }
    }
    Ok(IntegralDataset {
        delta_xx,
        i_xx,
        i_xu,
        i_qx,
        interval_boundaries: idx.iter().map(|&i| times[i]).collect(),
    })
}

//! Independent oracles and random instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use invgame_core::game::{
    closed_loop_matrix, lyapunov_iterations, stabilizing_seed, Dynamics, FeedbackSet, GameSpec,
    LyapunovOptions, LyapunovSolution,
};
use invgame_core::linalg::spectral_abscissa;
use invgame_core::model_free::{packed_len, state_quad_pack};
use invgame_core::trajectory::IntegralDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, 1.0);
    &g * g.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, scale);
    (&g + g.transpose()) * 0.5
}

/// Random stable matrix: a random matrix shifted left of the imaginary axis.
pub fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 2.0);
    let abscissa = spectral_abscissa(&m).unwrap();
    let shift = abscissa + rng.random_range(0.2..2.0);
    m - DMatrix::identity(n, n) * shift
}

/// Random game with admissible weights and single-input players.
pub fn random_game(rng: &mut ChaCha8Rng, n: usize, players: usize) -> GameSpec {
    let a = random_matrix(rng, n, n, 1.5);
    let b = (0..players).map(|_| random_matrix(rng, n, 1, 1.0)).collect();
    let q = (0..players).map(|_| random_spd(rng, n, 0.5)).collect();
    let r = (0..players)
        .map(|i| {
            (0..players)
                .map(|j| {
                    let v = if i == j {
                        rng.random_range(0.5..3.0)
                    } else {
                        rng.random_range(0.0..1.0)
                    };
                    DMatrix::from_element(1, 1, v)
                })
                .collect()
        })
        .collect();
    GameSpec::new(Dynamics::new(a, b).unwrap(), q, r).unwrap()
}

/// A random game together with its stabilizing equilibrium, retrying
/// until the Lyapunov iterations converge from the Bass seed.
pub fn random_solved_game(rng: &mut ChaCha8Rng, n: usize, players: usize) -> (GameSpec, LyapunovSolution) {
    loop {
        let spec = random_game(rng, n, players);
        let Ok(seed) = stabilizing_seed(spec.dynamics()) else {
            continue;
        };
        if let Ok(sol) = lyapunov_iterations(&spec, &seed, &LyapunovOptions::with_eps(1e-13)) {
            let acl = closed_loop_matrix(spec.dynamics(), &sol.feedback).unwrap();
            if spectral_abscissa(&acl).unwrap() < -0.05 {
                return (spec, sol);
            }
        }
    }
}

/// Stabilizing Riccati solution of `AᵀK + KA - KBR⁻¹BᵀK + Q = 0` through the
/// matrix sign function of the Hamiltonian.
pub fn care_sign_function(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let g = b * r.clone().try_inverse().unwrap() * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let inv = z.clone().try_inverse().unwrap();
        let det = z.determinant().abs();
        let c = det.powf(-1.0 / (2 * n) as f64);
        let next = (&z * c + inv / c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < 1e-15 {
            break;
        }
    }
    let id = DMatrix::<f64>::identity(n, n);
    // [W12; W22 + I] K = -[W11 + I; W21]
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(z.view((0, 0), (n, n)) + &id));
    rhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, 0), (n, n)));
    let k = lhs.svd(true, true).solve(&(-rhs), 0.0).unwrap();
    (&k + k.transpose()) * 0.5
}

/// Sinusoid excitation `Σ aₖ sin(ωₖt + φₖ)` on every input channel.
#[derive(Debug, Clone)]
pub struct Excitation {
    /// Per player, per channel: (amplitude, frequency, phase).
    pub tones: Vec<Vec<Vec<(f64, f64, f64)>>>,
}

impl Excitation {
    pub fn random(rng: &mut ChaCha8Rng, input_dims: &[usize], tones: usize, amplitude: f64) -> Self {
        Self {
            tones: input_dims
                .iter()
                .map(|&m| {
                    (0..m)
                        .map(|_| {
                            (0..tones)
                                .map(|_| {
                                    (
                                        amplitude * rng.random_range(0.5..1.0),
                                        rng.random_range(0.5..12.0),
                                        rng.random_range(0.0..std::f64::consts::TAU),
                                    )
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn none(input_dims: &[usize]) -> Self {
        Self {
            tones: input_dims.iter().map(|&m| vec![Vec::new(); m]).collect(),
        }
    }

    fn oscillators(&self) -> usize {
        self.tones.iter().flatten().map(|c| c.len()).sum::<usize>() * 2
    }
}

/// Exact interval integrals for `ẋ = Ax + ΣBᵢuᵢ`, `uᵢ = -Fᵢx + ωᵢ(t)`,
/// with `ωᵢ` a sum of sinusoids. Each tone is generated by a two-state
/// oscillator so the augmented state obeys `ż = Mz`, and the integrals of
/// `zzᵀ` come from one matrix exponential per interval (Van Loan).
pub fn exact_dataset(
    dynamics: &Dynamics,
    fb: &FeedbackSet,
    excitation: &Excitation,
    x0: &DVector<f64>,
    boundaries: &[f64],
) -> IntegralDataset {
    let n = dynamics.state_dim();
    let dims = dynamics.input_dims();
    let osc = excitation.oscillators();
    let dim = n + osc;
    let acl = closed_loop_matrix(dynamics, fb).unwrap();

    let mut mz = DMatrix::zeros(dim, dim);
    mz.view_mut((0, 0), (n, n)).copy_from(&acl);
    // input readouts u_i = U_i z
    let mut u_maps: Vec<DMatrix<f64>> = dims.iter().map(|&m| DMatrix::zeros(m, dim)).collect();
    for (i, f) in fb.gains().iter().enumerate() {
        u_maps[i].view_mut((0, 0), (dims[i], n)).copy_from(&(-f));
    }
    let mut z0 = DVector::zeros(dim);
    z0.rows_mut(0, n).copy_from(x0);
    let mut slot = n;
    for (i, channels) in excitation.tones.iter().enumerate() {
        for (c, tones) in channels.iter().enumerate() {
            for &(amp, w, phase) in tones {
                // s = sin(wt + φ), k = cos(wt + φ)
                mz[(slot, slot + 1)] = w;
                mz[(slot + 1, slot)] = -w;
                z0[slot] = phase.sin();
                z0[slot + 1] = phase.cos();
                u_maps[i][(c, slot)] += amp;
                slot += 2;
            }
        }
    }
    // the excitation drives the plant through B_i
    let mut drive = DMatrix::zeros(n, dim);
    for (i, b) in dynamics.b().iter().enumerate() {
        let mut e = u_maps[i].clone();
        e.view_mut((0, 0), (dims[i], n)).fill(0.0);
        drive += b * e;
    }
    let top = mz.view((0, 0), (n, dim)).clone_owned() + drive;
    mz.view_mut((0, 0), (n, dim)).copy_from(&top);

    let s = boundaries.len() - 1;
    let nq = packed_len(n);
    let mut data = IntegralDataset {
        delta_xx: DMatrix::zeros(s, nq),
        i_xx: DMatrix::zeros(s, n * n),
        i_xu: dims.iter().map(|m| DMatrix::zeros(s, n * m)).collect(),
        i_qx: DMatrix::zeros(s, nq),
        interval_boundaries: boundaries.to_vec(),
    };
    let mut z = (&mz * boundaries[0]).exp() * &z0;
    for l in 0..s {
        let t = boundaries[l + 1] - boundaries[l];
        let mut c = DMatrix::zeros(2 * dim, 2 * dim);
        c.view_mut((0, 0), (dim, dim)).copy_from(&(-&mz));
        c.view_mut((0, dim), (dim, dim)).copy_from(&(&z * z.transpose()));
        c.view_mut((dim, dim), (dim, dim)).copy_from(&mz.transpose());
        let e = (c * t).exp();
        let f22 = e.view((dim, dim), (dim, dim)).clone_owned();
        let f12 = e.view((0, dim), (dim, dim)).clone_owned();
        let g = f22.transpose() * f12;
        let g = (&g + g.transpose()) * 0.5;
        let z_next = f22.transpose() * &z;

        let x_a = z.rows(0, n).clone_owned();
        let x_b = z_next.rows(0, n).clone_owned();
        let dq = state_quad_pack(&x_b) - state_quad_pack(&x_a);
        data.delta_xx.row_mut(l).copy_from(&dq.transpose());
        let gxx = g.view((0, 0), (n, n)).clone_owned();
        for a in 0..n {
            for b in 0..n {
                data.i_xx[(l, a * n + b)] = gxx[(a, b)];
            }
        }
        let mut k = 0;
        for a in 0..n {
            for b in a..n {
                data.i_qx[(l, k)] = gxx[(a, b)];
                k += 1;
            }
        }
        for (i, u) in u_maps.iter().enumerate() {
            let gxu = g.view((0, 0), (n, dim)) * u.transpose();
            for a in 0..n {
                for b in 0..dims[i] {
                    data.i_xu[i][(l, a * dims[i] + b)] = gxu[(a, b)];
                }
            }
        }
        z = z_next;
    }
    data
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

//! Scenario execution. Every artifact is rendered in memory and written only
//! once the run has finished, so an input error never leaves files behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use invgame_core::equivalence::{
    enumerate_equivalent_family, verify_equivalent, AdjustmentRequest, VerificationReport,
};
use invgame_core::model_based::{run_algorithm1, SynthesizedGame};
use invgame_core::model_free::{run_algorithm2_from_logs, CostSet};
use invgame_core::trajectory::{
    sample_indices_every, simulate_closed_loop, uniform_boundaries, TrajectoryLog,
};
use invgame_core::{solve_nash, Dynamics, FeedbackSet, LyapunovOptions, LyapunovSolution};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::scenario::{rows, Algorithm, FeedbackFile, GameFile, Resolved};
use crate::CliError;

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trace_every: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Converged,
    /// Non-convergence or a numerical failure.
    Failed,
    InputError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Converged => 0,
            Status::Failed => 2,
            Status::InputError => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    /// Human-readable report for stdout.
    pub summary: String,
    pub written: Vec<PathBuf>,
}

impl Outcome {
    pub fn from_error(context: &str, err: &CliError) -> Self {
        let status = match err {
            CliError::Input(_) => Status::InputError,
            CliError::Numerical(_) => Status::Failed,
        };
        Outcome {
            status,
            summary: format!("{context}: error: {err}\n"),
            written: Vec::new(),
        }
    }
}

#[derive(Default)]
struct Artifacts(Vec<(&'static str, Vec<u8>)>);

impl Artifacts {
    fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.0.push((name, bytes));
    }

    fn json<T: Serialize>(&mut self, name: &'static str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable report");
        bytes.push(b'\n');
        self.add(name, bytes);
    }

    fn write(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
        let mut written = Vec::new();
        for (name, bytes) in self.0 {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn numerical(what: &str) -> impl Fn(invgame_core::Error) -> CliError + '_ {
    move |e| CliError::Numerical(format!("{what}: {e}"))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> invgame_core::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn output_dir(resolved: &Resolved, opts: &RunOptions) -> PathBuf {
    let base = opts
        .out
        .clone()
        .or_else(|| resolved.scenario.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    base.join(&resolved.name)
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| r.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "))
        .collect();
    format!("[{}]", rows.join("; "))
}

fn solve_demonstrated(resolved: &Resolved) -> Result<LyapunovSolution, CliError> {
    let spec = resolved
        .demonstrated
        .as_ref()
        .ok_or_else(|| CliError::Input("scenario has no `demonstrated` costs".into()))?;
    solve_nash(spec, None, &LyapunovOptions::with_eps(1e-12)).map_err(numerical("demonstrated game"))
}

fn simulate(resolved: &Resolved, fb: &FeedbackSet) -> Result<TrajectoryLog, CliError> {
    let sim = &resolved.scenario.simulation;
    let log = simulate_closed_loop(&resolved.dynamics, fb, &resolved.x0, sim.step, sim.horizon, None)
        .map_err(numerical("demonstration"))?;
    if log.diverged() {
        return Err(CliError::Numerical("demonstration diverged".into()));
    }
    Ok(log)
}

fn demonstration(resolved: &Resolved) -> Result<TrajectoryLog, CliError> {
    match &resolved.demo_log {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
            let log = TrajectoryLog::read_csv(file).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let dims = resolved.dynamics.input_dims();
            if log.state_dim() != resolved.dynamics.state_dim() || log.input_dims() != dims {
                return Err(CliError::Input(format!(
                    "{}: columns do not match the scenario dimensions",
                    path.display()
                )));
            }
            Ok(log)
        }
        None => simulate(resolved, &solve_demonstrated(resolved)?.feedback),
    }
}

#[derive(Serialize)]
struct DynamicsOut {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<Vec<f64>>>,
}

impl DynamicsOut {
    fn new(d: &Dynamics, b: &[DMatrix<f64>]) -> Self {
        Self {
            a: rows(d.a()),
            b: b.iter().map(rows).collect(),
        }
    }
}

fn list(ms: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
    ms.iter().map(rows).collect()
}

fn grid(ms: &[Vec<DMatrix<f64>>]) -> Vec<Vec<Vec<Vec<f64>>>> {
    ms.iter().map(|r| list(r)).collect()
}

#[derive(Serialize)]
struct GameReport<'a> {
    scenario: &'a str,
    algorithm: Algorithm,
    converged: bool,
    iterations: usize,
    dynamics: DynamicsOut,
    /// Input matrices the synthesis worked with (recovered when model-free).
    b_used: Vec<Vec<Vec<f64>>>,
    q: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<Vec<Vec<f64>>>>,
    k: Vec<Vec<Vec<f64>>>,
    feedback: Vec<Vec<Vec<f64>>>,
    target: Vec<Vec<Vec<f64>>>,
    initial_values: Vec<Vec<Vec<f64>>>,
    initial_feedback: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct AdjustmentOut {
    i: usize,
    j: usize,
    r: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct FamilyOut {
    adjustment: Vec<AdjustmentOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<VerificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn family(out: &SynthesizedGame, dynamics: &Dynamics, adjustments: &[AdjustmentRequest], tol: f64) -> Vec<FamilyOut> {
    enumerate_equivalent_family(out, dynamics, adjustments, tol)
        .into_iter()
        .zip(adjustments)
        .map(|(member, req)| {
            let adjustment = req
                .new_r_offdiag
                .iter()
                .map(|w| AdjustmentOut {
                    i: w.i + 1,
                    j: w.j + 1,
                    r: rows(&w.r),
                })
                .collect();
            match member {
                Ok(m) => FamilyOut {
                    adjustment,
                    q: Some(list(m.game.q())),
                    r: Some(grid(m.game.r())),
                    report: Some(m.report),
                    error: None,
                },
                Err(e) => FamilyOut {
                    adjustment,
                    q: None,
                    r: None,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// `invgame run`: demonstration, synthesis, verification and family.
pub fn run_scenario(resolved: &Resolved, opts: &RunOptions) -> Outcome {
    let dir = output_dir(resolved, opts);
    let mut artifacts = Artifacts::default();
    match synthesize(resolved, opts, &mut artifacts) {
        Ok((status, summary)) => match artifacts.write(&dir) {
            Ok(written) => Outcome { status, summary, written },
            Err(e) => Outcome::from_error(&resolved.name, &e),
        },
        Err(err @ CliError::Input(_)) => Outcome::from_error(&resolved.name, &err),
        Err(err) => {
            // keep whatever was produced before the numerical failure
            let written = artifacts.write(&dir).unwrap_or_default();
            Outcome {
                written,
                ..Outcome::from_error(&resolved.name, &err)
            }
        }
    }
}

fn synthesize(
    resolved: &Resolved,
    opts: &RunOptions,
    artifacts: &mut Artifacts,
) -> Result<(Status, String), CliError> {
    let sc = &resolved.scenario;
    let demo = demonstration(resolved)?;
    artifacts.add("demo.csv", csv_bytes(|b| demo.write_csv(b)));
    let samples = sample_indices_every(&demo, sc.simulation.sample_interval).map_err(numerical("sampling"))?;

    let out = match sc.algorithm {
        Algorithm::ModelBased => {
            run_algorithm1(&resolved.initial, &demo, &samples, &sc.config).map_err(numerical("model-based synthesis"))?
        }
        Algorithm::ModelFree => {
            let probe = sc.probe.as_ref().expect("validated");
            let f_hat = invgame_core::trajectory::estimate_feedback(&demo, &samples)
                .map_err(numerical("feedback estimation"))?;
            let mut noise = probe.noise.clone();
            if let Some(seed) = opts.seed {
                noise.seed = seed;
            }
            let x0 = probe.x0.clone().map(DVector::from_vec).unwrap_or_else(|| resolved.x0.clone());
            let probe_log = simulate_closed_loop(&resolved.dynamics, &f_hat, &x0, probe.step, probe.horizon, Some(&noise))
                .map_err(numerical("probe"))?;
            if probe_log.diverged() {
                return Err(CliError::Numerical("probe trajectory diverged".into()));
            }
            artifacts.add("probe.csv", csv_bytes(|b| probe_log.write_csv(b)));
            let costs = CostSet::new(resolved.initial.q().to_vec(), resolved.initial.r().to_vec())
                .map_err(|e| CliError::Input(format!("initial: {e}")))?;
            run_algorithm2_from_logs(
                &demo,
                &samples,
                &probe_log,
                &uniform_boundaries(0.0, probe.interval, probe.intervals),
                &costs,
                &sc.config,
                Some(&resolved.dynamics),
            )
            .map_err(numerical("model-free synthesis"))?
        }
    };

    let every = opts.trace_every.or(sc.output.trace_every).unwrap_or(1).max(1);
    artifacts.add("trace.csv", csv_bytes(|b| out.trace.write_csv(b, every)));
    artifacts.json(
        "game.json",
        &GameReport {
            scenario: &resolved.name,
            algorithm: sc.algorithm,
            converged: out.converged,
            iterations: out.iterations,
            dynamics: DynamicsOut::new(&resolved.dynamics, resolved.dynamics.b()),
            b_used: list(&out.b),
            q: list(&out.q_star),
            r: grid(&out.r),
            k: list(out.k_star.values()),
            feedback: list(out.f_star.gains()),
            target: list(out.target.gains()),
            initial_values: list(out.initial_values.values()),
            initial_feedback: list(out.initial_feedback.gains()),
        },
    );

    let tol = opts.tol.unwrap_or(sc.equivalence.tol);
    let game = out.game(&resolved.dynamics).map_err(numerical("synthesized game"))?;
    let report = verify_equivalent(&game, &out.f_star, tol).map_err(numerical("verification"))?;
    artifacts.json("verification.json", &report);
    let members = family(&out, &resolved.dynamics, &resolved.adjustments, tol);
    if !members.is_empty() {
        artifacts.json("family.json", &members);
    }

    let mut s = String::new();
    let state = if out.converged { "converged" } else { "did not converge" };
    let _ = writeln!(s, "{}: {} ({state} after {} iterations)", resolved.name, sc.description, out.iterations);
    for (i, (f, q)) in out.f_star.gains().iter().zip(&out.q_star).enumerate() {
        let _ = writeln!(s, "  player {}: F* = {}  Q* = {}", i + 1, fmt_matrix(f), fmt_matrix(q));
    }
    let _ = writeln!(s, "  verification at tol {tol:e}: {:?} ({})", report.verdict, report.message);
    let equivalent = members.iter().filter(|m| m.report.as_ref().is_some_and(|r| r.is_equivalent())).count();
    if !members.is_empty() {
        let _ = writeln!(s, "  equivalent family: {equivalent}/{} adjusted games verified", members.len());
    }
    let status = if out.converged { Status::Converged } else { Status::Failed };
    Ok((status, s))
}

#[derive(Serialize)]
struct DemoReport<'a> {
    scenario: &'a str,
    sweeps: usize,
    values: Vec<Vec<Vec<f64>>>,
    feedback: Vec<Vec<Vec<f64>>>,
}

/// `invgame demo`: solve the ground-truth game and record its trajectory.
pub fn generate_demo(resolved: &Resolved, opts: &RunOptions) -> Outcome {
    let run = || -> Result<(Artifacts, String), CliError> {
        let sol = solve_demonstrated(resolved)?;
        let log = simulate(resolved, &sol.feedback)?;
        let mut artifacts = Artifacts::default();
        artifacts.add("demo.csv", csv_bytes(|b| log.write_csv(b)));
        artifacts.json(
            "demonstrated.json",
            &DemoReport {
                scenario: &resolved.name,
                sweeps: sol.iterations,
                values: list(sol.values.values()),
                feedback: list(sol.feedback.gains()),
            },
        );
        let mut s = String::new();
        let _ = writeln!(s, "{}: demonstrated equilibrium after {} sweeps", resolved.name, sol.iterations);
        for (i, (f, k)) in sol.feedback.gains().iter().zip(sol.values.values()).enumerate() {
            let _ = writeln!(s, "  player {}: F_d = {}  K_d = {}", i + 1, fmt_matrix(f), fmt_matrix(k));
        }
        Ok((artifacts, s))
    };
    match run() {
        Ok((artifacts, summary)) => match artifacts.write(&output_dir(resolved, opts)) {
            Ok(written) => Outcome {
                status: Status::Converged,
                summary,
                written,
            },
            Err(e) => Outcome::from_error(&resolved.name, &e),
        },
        Err(e) => Outcome::from_error(&resolved.name, &e),
    }
}

/// `invgame verify`: re-solve a game from a feedback set and print the report.
pub fn verify_files(game: &Path, feedback: &Path, tol: f64) -> Outcome {
    let run = || -> Result<VerificationReport, CliError> {
        let g: GameFile = crate::scenario::parse_json(&crate::scenario::read_text(game)?, &game.display().to_string())?;
        let f: FeedbackFile =
            crate::scenario::parse_json(&crate::scenario::read_text(feedback)?, &feedback.display().to_string())?;
        let spec = g.build()?;
        let fb = f.build();
        fb.check_against(spec.dynamics()).map_err(|e| CliError::Input(format!("feedback: {e}")))?;
        if !(tol > 0.0) {
            return Err(CliError::Input("tolerance must be positive".into()));
        }
        verify_equivalent(&spec, &fb, tol).map_err(numerical("verification"))
    };
    match run() {
        Ok(report) => Outcome {
            status: if report.is_equivalent() { Status::Converged } else { Status::Failed },
            summary: serde_json::to_string_pretty(&report).expect("serializable report") + "\n",
            written: Vec::new(),
        },
        Err(e) => Outcome::from_error("verify", &e),
    }
}

//! Scenario file schema. Matrices are nested row-major arrays; a bare number
//! stands for a 1×1 matrix. Player indices in adjustments are 1-based.

use std::path::{Path, PathBuf};

use invgame_core::equivalence::{AdjustmentRequest, OffDiagonalWeight};
use invgame_core::model_based::Algorithm1Config;
use invgame_core::trajectory::NoiseSpec;
use invgame_core::{Dynamics, FeedbackSet, GameSpec};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix(pub DMatrix<f64>);

impl TryFrom<MatrixRepr> for Matrix {
    type Error = String;

    fn try_from(repr: MatrixRepr) -> Result<Self, String> {
        match repr {
            MatrixRepr::Scalar(v) => Ok(Matrix(DMatrix::from_element(1, 1, v))),
            MatrixRepr::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 {
                    return Err("matrix must have at least one row and one column".into());
                }
                if let Some(k) = rows.iter().position(|r| r.len() != cols) {
                    return Err(format!(
                        "row {k} has {} entries, expected {cols}",
                        rows[k].len()
                    ));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Ok(Matrix(DMatrix::from_row_slice(flat.len() / cols, cols, &flat)))
            }
        }
    }
}

/// Row-major nested arrays for output documents.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn unwrap_all(ms: &[Matrix]) -> Vec<DMatrix<f64>> {
    ms.iter().map(|m| m.0.clone()).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub a: Matrix,
    pub b: Vec<Matrix>,
}

impl DynamicsSpec {
    pub fn build(&self) -> Result<Dynamics, CliError> {
        Dynamics::new(self.a.0.clone(), unwrap_all(&self.b)).map_err(|e| CliError::Input(format!("dynamics: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSpec {
    pub q: Vec<Matrix>,
    pub r: Vec<Vec<Matrix>>,
}

impl CostsSpec {
    pub fn build(&self, dynamics: &Dynamics, what: &str) -> Result<GameSpec, CliError> {
        let r = self.r.iter().map(|row| unwrap_all(row)).collect();
        GameSpec::new(dynamics.clone(), unwrap_all(&self.q), r).map_err(|e| CliError::Input(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ModelBased,
    ModelFree,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    pub step: f64,
    pub horizon: f64,
    /// Spacing of the samples used for feedback estimation.
    pub sample_interval: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// Defaults to the demonstration's initial state.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub step: f64,
    pub horizon: f64,
    /// Width and number of the integration intervals.
    pub interval: f64,
    pub intervals: usize,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustmentSpec {
    pub i: usize,
    pub j: usize,
    pub r: Matrix,
}

fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Each entry is one adjusted game.
    #[serde(default)]
    pub adjustments: Vec<Vec<AdjustmentSpec>>,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            adjustments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Keep every k-th trace row.
    #[serde(default)]
    pub trace_every: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub description: String,
    pub algorithm: Algorithm,
    pub dynamics: DynamicsSpec,
    /// Ground-truth costs used to generate the demonstration.
    #[serde(default)]
    pub demonstrated: Option<CostsSpec>,
    /// A recorded demonstration (CSV), relative to the scenario file.
    #[serde(default)]
    pub demo_log: Option<PathBuf>,
    pub initial: CostsSpec,
    #[serde(default)]
    pub config: Algorithm1Config,
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    #[serde(default)]
    pub equivalence: EquivalenceSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Parses JSON, reporting the field path of the first schema violation.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Input(format!("{origin}: at `{path}`: {}", e.inner()))
    })
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

/// A scenario with every matrix checked against the game invariants.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub name: String,
    pub scenario: Scenario,
    pub dynamics: Dynamics,
    pub demonstrated: Option<GameSpec>,
    pub initial: GameSpec,
    pub x0: DVector<f64>,
    pub demo_log: Option<PathBuf>,
    pub adjustments: Vec<AdjustmentRequest>,
}

fn positive(v: f64, what: &str) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} must be positive and finite")))
    }
}

pub fn load(path: &Path) -> Result<Resolved, CliError> {
    let origin = path.display().to_string();
    let scenario: Scenario = parse_json(&read_text(path)?, &origin)?;
    let name = scenario
        .name
        .clone()
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "scenario".into());
    resolve(scenario, name, path.parent().unwrap_or(Path::new(".")))
}

pub fn resolve(scenario: Scenario, name: String, base_dir: &Path) -> Result<Resolved, CliError> {
    let input = |what: &str, e: invgame_core::Error| CliError::Input(format!("{what}: {e}"));
    let dynamics = scenario.dynamics.build()?;
    let players = dynamics.players();
    let n = dynamics.state_dim();
    let initial = scenario.initial.build(&dynamics, "initial")?;
    let demonstrated = scenario
        .demonstrated
        .as_ref()
        .map(|c| c.build(&dynamics, "demonstrated"))
        .transpose()?;
    scenario.config.validate(players).map_err(|e| input("config", e))?;

    let sim = &scenario.simulation;
    if sim.x0.len() != n {
        return Err(CliError::Input(format!(
            "simulation.x0: expected {n} entries, found {}",
            sim.x0.len()
        )));
    }
    positive(sim.step, "simulation.step")?;
    positive(sim.horizon, "simulation.horizon")?;
    positive(sim.sample_interval, "simulation.sample_interval")?;

    let demo_log = scenario.demo_log.as_ref().map(|p| base_dir.join(p));
    if demo_log.is_none() && demonstrated.is_none() {
        return Err(CliError::Input(
            "either `demonstrated` costs or a `demo_log` is required".into(),
        ));
    }
    if let Some(p) = &demo_log {
        if !p.is_file() {
            return Err(CliError::Input(format!("demo_log {} does not exist", p.display())));
        }
    }
    if scenario.algorithm == Algorithm::ModelFree {
        let Some(probe) = &scenario.probe else {
            return Err(CliError::Input("model_free scenarios need a `probe` section".into()));
        };
        positive(probe.step, "probe.step")?;
        positive(probe.horizon, "probe.horizon")?;
        positive(probe.interval, "probe.interval")?;
        if probe.intervals == 0 {
            return Err(CliError::Input("probe.intervals must be positive".into()));
        }
        if probe.interval * probe.intervals as f64 > probe.horizon * (1.0 + 1e-9) {
            return Err(CliError::Input("probe intervals extend past probe.horizon".into()));
        }
        if probe.x0.as_ref().is_some_and(|x| x.len() != n) {
            return Err(CliError::Input(format!("probe.x0: expected {n} entries")));
        }
        probe.noise.validate().map_err(|e| input("probe.noise", e))?;
        invgame_core::model_free::CostSet::new(initial.q().to_vec(), initial.r().to_vec())
            .map_err(|e| input("initial", e))?;
    }
    positive(scenario.equivalence.tol, "equivalence.tol")?;

    let m = dynamics.input_dims();
    let mut adjustments = Vec::new();
    for (k, set) in scenario.equivalence.adjustments.iter().enumerate() {
        let mut new_r_offdiag = Vec::new();
        for adj in set {
            let ok = (1..=players).contains(&adj.i) && (1..=players).contains(&adj.j) && adj.i != adj.j;
            if !ok {
                return Err(CliError::Input(format!(
                    "equivalence.adjustments[{k}]: R[{}][{}] is not an off-diagonal weight of a {players}-player game",
                    adj.i, adj.j
                )));
            }
            let mj = m[adj.j - 1];
            if adj.r.0.shape() != (mj, mj) {
                return Err(CliError::Input(format!(
                    "equivalence.adjustments[{k}]: R[{}][{}] must be {mj}x{mj}",
                    adj.i, adj.j
                )));
            }
            new_r_offdiag.push(OffDiagonalWeight {
                i: adj.i - 1,
                j: adj.j - 1,
                r: adj.r.0.clone(),
            });
        }
        adjustments.push(AdjustmentRequest { new_r_offdiag });
    }

    let x0 = DVector::from_vec(sim.x0.clone());
    Ok(Resolved {
        name,
        scenario,
        dynamics,
        demonstrated,
        initial,
        x0,
        demo_log,
        adjustments,
    })
}

/// Input of `invgame verify`: a game, optionally with extra fields.
#[derive(Debug, Clone, Deserialize)]
pub struct GameFile {
    pub dynamics: DynamicsSpec,
    pub q: Vec<Matrix>,
    pub r: Vec<Vec<Matrix>>,
}

impl GameFile {
    pub fn build(&self) -> Result<GameSpec, CliError> {
        let dynamics = self.dynamics.build()?;
        CostsSpec {
            q: self.q.clone(),
            r: self.r.clone(),
        }
        .build(&dynamics, "game")
    }
}

/// Input of `invgame verify`: feedback gains, optionally with extra fields.
#[derive(Debug, Clone, Deserialize)]
pub struct FeedbackFile {
    pub feedback: Vec<Matrix>,
}

impl FeedbackFile {
    pub fn build(&self) -> FeedbackSet {
        FeedbackSet::new(unwrap_all(&self.feedback))
    }
}

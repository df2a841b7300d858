use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use invgame::runner::{generate_demo, run_scenario, verify_files, Outcome, RunOptions, Status};
use invgame::scenario;

#[derive(Parser)]
#[command(name = "invgame", version, about = "Forward and inverse solvers for LQ differential games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory; each scenario writes to a subdirectory named after it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the probing-noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every k-th row of the convergence trace.
    #[arg(long)]
    trace_every: Option<usize>,
    /// Verification tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            trace_every: self.trace_every,
            tol: self.tol,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run inverse synthesis for one or more scenario files.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Scenarios processed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Solve the demonstrated game of a scenario and write its trajectory.
    Demo {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check that a game's equilibrium reproduces a feedback set.
    Verify {
        game: PathBuf,
        feedback: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

// a closed stdout (e.g. piped into `head`) is not an error of the run
fn report(outcome: &Outcome) {
    if outcome.status == Status::InputError {
        let _ = write!(std::io::stderr(), "{}", outcome.summary);
        return;
    }
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{}", outcome.summary);
    for path in &outcome.written {
        let _ = writeln!(out, "  wrote {}", path.display());
    }
}

fn run_one(path: &PathBuf, opts: &RunOptions) -> Outcome {
    match scenario::load(path) {
        Ok(resolved) => run_scenario(&resolved, opts),
        Err(e) => Outcome::from_error(&path.display().to_string(), &e),
    }
}

fn run_all(paths: &[PathBuf], jobs: usize, opts: &RunOptions) -> Vec<Outcome> {
    let slots: Vec<Mutex<Option<Outcome>>> = paths.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, paths.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = paths.get(k) else { break };
                *slots[k].lock().unwrap() = Some(run_one(path, opts));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every scenario ran")).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcomes = match &cli.command {
        Command::Run { scenarios, jobs, common } => run_all(scenarios, *jobs, &common.options()),
        Command::Demo { scenario, common } => vec![match scenario::load(scenario) {
            Ok(resolved) => generate_demo(&resolved, &common.options()),
            Err(e) => Outcome::from_error(&scenario.display().to_string(), &e),
        }],
        Command::Verify { game, feedback, tol } => vec![verify_files(game, feedback, *tol)],
    };
    outcomes.iter().for_each(report);
    let worst = outcomes.iter().map(|o| o.status).max().unwrap_or(Status::Converged);
    ExitCode::from(worst.exit_code() as u8)
}

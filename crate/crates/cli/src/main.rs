use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use stochlm::config::ExperimentConfig;
use stochlm::experiment::{run_experiment, Task};

#[derive(Parser)]
#[command(name = "stochlm", version, about = "Stochastic landmark experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward samples, a few recorded paths and the deterministic flow.
    Simulate(RunArgs),
    /// Moment equations against Monte Carlo.
    Moments(RunArgs),
    /// Guided bridges to a target configuration.
    Bridge(RunArgs),
    /// Noise amplitudes from endpoint moments.
    InferMoments(RunArgs),
    /// Noise amplitudes by Monte Carlo EM over bridges.
    InferEm(RunArgs),
    /// Noise amplitudes by direct likelihood maximisation.
    InferMle(RunArgs),
    /// Deterministic initial momentum reaching a target.
    Shoot(RunArgs),
    /// Eulerian noise against the additive baseline.
    CompareBaseline(RunArgs),
}

impl Command {
    fn split(self) -> (Task, RunArgs) {
        match self {
            Command::Simulate(a) => (Task::Simulate, a),
            Command::Moments(a) => (Task::Moments, a),
            Command::Bridge(a) => (Task::Bridge, a),
            Command::InferMoments(a) => (Task::InferMoments, a),
            Command::InferEm(a) => (Task::InferEm, a),
            Command::InferMle(a) => (Task::InferMle, a),
            Command::Shoot(a) => (Task::Shoot, a),
            Command::CompareBaseline(a) => (Task::CompareBaseline, a),
        }
    }
}

/// Exit code 2 for unusable input, 3 for failures while running.
fn run(task: Task, args: RunArgs) -> Result<(), (u8, stochlm::Error)> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| (2, e))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.unwrap_or_else(|| cfg.output_dir.clone());
    info!("{task}: config {} -> {}", args.config.display(), out.display());
    let m = run_experiment(&cfg, task, &out).map_err(|e| (if e.is_validation() { 2 } else { 3 }, e))?;
    info!("{task}: {} files in {:.2}s", m.files.len(), m.wall_time_s);
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("STOCHLM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    error!("could not size the thread pool: {e}");
                }
            }
            _ => {
                error!("STOCHLM_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let (task, args) = cli.command.split();
    match run(task, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            error!("{e}");
            ExitCode::from(code)
        }
    }
}

//! `stochadj` experiment runner.
//!
//! Every subcommand reads one JSON experiment config and writes one CSV
//! table. Exit codes: 0 success, 1 output failure, 2 invalid input,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use config::ExperimentConfig;
use error::{CliError, CliResult};
use output::Destination;

#[derive(Parser, Debug)]
#[command(name = "stochadj", version, about = "Gradient-estimation experiments for sequential stochastic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare estimators against exact and finite-difference references.
    GradCheck(Common),
    /// Exact estimator variance per baseline across a grid of θ values.
    VarianceSweep(Common),
    /// Stochastic gradient descent with a chosen baseline.
    Train(Common),
    /// Fit OVM car-following parameters by projected gradient descent.
    CalibrateOvm(Common),
    /// Time objective, adjoint and finite-difference gradients as the fleet grows.
    CostScaling(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON).
    #[arg(value_name = "CONFIG", conflicts_with = "config")]
    config_path: Option<PathBuf>,
    /// Experiment config (JSON); same as the positional argument.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `<subcommand>.csv`; stdout when neither this nor `output` is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "STOCHADJ_THREADS")]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GradCheck(c) => ("grad-check", c),
            Command::VarianceSweep(c) => ("variance-sweep", c),
            Command::Train(c) => ("train", c),
            Command::CalibrateOvm(c) => ("calibrate-ovm", c),
            Command::CostScaling(c) => ("cost-scaling", c),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, common) = cli.command.parts();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("threads", e))?;
    }
    let path = common
        .config_path
        .as_ref()
        .or(common.config.as_ref())
        .ok_or_else(|| CliError::config("config", "a config file is required"))?;
    let cfg = ExperimentConfig::load(path)?;
    let ctx = commands::Ctx {
        seed: cfg.seed(common.seed),
        dest: Destination::resolve(common.out.as_ref(), cfg.output.as_ref(), name),
        cfg,
    };
    match cli.command {
        Command::GradCheck(_) => commands::grad_check::run(&ctx),
        Command::VarianceSweep(_) => commands::variance_sweep::run(&ctx),
        Command::Train(_) => commands::train::run(&ctx),
        Command::CalibrateOvm(_) => commands::calibrate::run(&ctx),
        Command::CostScaling(_) => commands::cost::run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

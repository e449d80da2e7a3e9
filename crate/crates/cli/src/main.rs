use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pil_lab::config::Experiment;
use pil_lab::experiments::{load_config, run, Context};
use pil_lab::CliError;

#[derive(Parser)]
#[command(name = "pil-lab", version, about = "Run imitation-learning experiments from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form BC vs PIL on the linear plant under noise.
    LinNoiseSweep(Common),
    /// Neural learners on the linear plant across prediction horizons.
    LinPredOrder(Common),
    /// Neural learners on the pendulum.
    Pendulum(Common),
    /// Error-scaling scan and noise-term comparison.
    TheoryScan(Common),
    /// Generate and store datasets.
    GenData(Common),
    /// Train a method on stored datasets.
    Train(Common),
    /// Evaluate stored models.
    Eval(Common),
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (expected, common) = match cli.command {
        Command::LinNoiseSweep(c) => (Experiment::LinNoiseSweep, c),
        Command::LinPredOrder(c) => (Experiment::LinPredOrder, c),
        Command::Pendulum(c) => (Experiment::Pendulum, c),
        Command::TheoryScan(c) => (Experiment::TheoryScan, c),
        Command::GenData(c) => (Experiment::GenData, c),
        Command::Train(c) => (Experiment::Train, c),
        Command::Eval(c) => (Experiment::Eval, c),
    };
    let cfg = load_config(&common.config, common.seeds, common.out)?;
    if cfg.experiment != expected {
        return Err(CliError::Config(format!(
            "config is for {}, command is {}",
            cfg.experiment.name(),
            expected.name()
        )));
    }
    let ctx = Context::new(cfg)?;
    for path in run(&ctx)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

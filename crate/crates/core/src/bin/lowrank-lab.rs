use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lowrank_core::config::ExperimentConfig;
use lowrank_core::pipeline::{run_experiment, Command};
use lowrank_core::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    /// Train and write metrics plus weight snapshots.
    Train,
    /// Train, then evaluate rank-r truncations of the weight updates.
    RankSweep,
    /// Train, then write singular spectra, pattern projections and the theorem report.
    Spectra,
    /// Train, then sweep magnitude pruning of W_O in both orders.
    PruneSweep,
    /// Compare analytic gradients with finite differences.
    GradCheck,
    /// Everything above, in dependency order.
    All,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Train => Command::Train,
            Sub::RankSweep => Command::RankSweep,
            Sub::Spectra => Command::Spectra,
            Sub::PruneSweep => Command::PruneSweep,
            Sub::GradCheck => Command::GradCheck,
            Sub::All => Command::All,
        }
    }
}

/// Train a one-layer Transformer on synthetic pattern data and study the
/// low-rank structure of its weight updates.
#[derive(Debug, Parser)]
#[command(name = "lowrank-lab", version)]
struct Cli {
    #[arg(value_enum)]
    subcommand: Sub,
    /// Experiment config (dotted `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random stream; overrides all seeds in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotFound(_) | Error::Format { .. } => 1,
        e if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = ExperimentConfig::load(&cli.config).and_then(|mut config| {
        if let Some(out) = cli.out {
            config.output_dir = out;
        }
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        run_experiment(&config, cli.subcommand.into())
    });
    match result {
        Ok(summary) => {
            println!("{}: wrote {} files to {}", Command::from(cli.subcommand), summary.written.len(), summary.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lowrank-lab {}: {e}", Command::from(cli.subcommand));
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{cmd_report, cmd_run, cmd_sweep, output_root, Failure};
use config::ExperimentConfig;

/// Continual-learning experiments with similarity-gated gradient updates.
#[derive(Parser)]
#[command(name = "sfao", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write per-run artifacts.
    Run(RunArgs),
    /// Run one experiment per threshold grid point and write sweep.csv.
    Sweep(SweepArgs),
    /// Recompute metrics from the matrix.csv files under a directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field, e.g. `--set optimizer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; takes precedence over SFAO_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let mut cfg =
                ExperimentConfig::load(&args.config, &args.overrides).map_err(Failure::Config)?;
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            let root = output_root(args.out, &cfg);
            cmd_run(&cfg, &root).map(drop)
        }
        Command::Sweep(args) => {
            let cfg =
                ExperimentConfig::load(&args.config, &args.overrides).map_err(Failure::Config)?;
            let root = output_root(args.out, &cfg);
            cmd_sweep(&cfg, &root).map(drop)
        }
        Command::Report { dir } => cmd_report(&dir).map(drop),
    }
}

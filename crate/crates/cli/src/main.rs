use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbsde_cli::commands::{cmd_loss_diagnostics, cmd_loss_scan, cmd_paths, cmd_train, cmd_variance_scan};
use fbsde_cli::{CliError, Invocation};

#[derive(Parser)]
#[command(name = "fbsde", version, about = "FBSDE training, path generation and multilevel variance scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoints plus the loss history.
    Train(Common),
    /// Simulate exact and/or surrogate paths.
    Paths(Common),
    /// Residual scaling of both loss variants against the step size.
    LossScan(Common),
    /// Coupled two-way and four-way differences across levels.
    VarianceScan(Common),
    /// Per-step remainder terms of the one-step residual.
    LossDiagnostics(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network checkpoint; repeat for θ then θ'.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let (cmd, common) = match cli.command {
        Command::Train(c) => ("train", c),
        Command::Paths(c) => ("paths", c),
        Command::LossScan(c) => ("loss-scan", c),
        Command::VarianceScan(c) => ("variance-scan", c),
        Command::LossDiagnostics(c) => ("loss-diagnostics", c),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let inv = Invocation::from_file(&common.config, common.seed, common.out, common.checkpoint)?;
    match cmd {
        "train" => {
            let (report, files) = cmd_train(&inv)?;
            if let Some(l) = report.final_loss() {
                println!("final loss {l:.6e}");
            }
            if let (Some(a), Some(b)) = (report.epsilon_initial, report.epsilon_final) {
                println!("epsilon estimate {a:.6e} -> {b:.6e}");
            }
            Ok(files)
        }
        "paths" => cmd_paths(&inv),
        "loss-scan" => cmd_loss_scan(&inv),
        "variance-scan" => cmd_variance_scan(&inv),
        _ => cmd_loss_diagnostics(&inv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

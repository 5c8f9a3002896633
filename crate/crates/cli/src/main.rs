use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgrpo_cli::config::parse_config;
use fedgrpo_cli::runner::{parse_sweep, report, run_ablation, run_experiment};

#[derive(Parser)]
#[command(name = "fedgrpo", version, about = "Federated GRPO simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        /// key = value config file or a run manifest
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a setting, e.g. --set beta=0.5 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep one of K, M, beta or G.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// e.g. K=4,8,12,16,20
        #[arg(long)]
        sweep: String,
        /// Seeds per value (seed, seed+1, ...)
        #[arg(long, default_value_t = 1)]
        repeats: u32,
    },
    /// Summarize finished runs without re-running them.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> fedgrpo_cli::Result<()> {
    match cmd {
        Command::Run { config, set } => {
            let cfg = parse_config(config.as_deref(), &set)?;
            let r = run_experiment(&cfg)?;
            let last = r.final_eval();
            println!(
                "round {}: pass@1 {:.4}; fedgrpo traffic {} bytes; artifacts in {}",
                last.round,
                last.overall,
                r.comm.fedgrpo_bytes,
                r.dir.display()
            );
        }
        Command::Ablate {
            config,
            set,
            sweep,
            repeats,
        } => {
            let cfg = parse_config(config.as_deref(), &set)?;
            let (param, values) = parse_sweep(&sweep)?;
            let r = run_ablation(&cfg, param, &values, repeats)?;
            print!("{}", report(&[r.dir])?);
        }
        Command::Report { dirs } => print!("{}", report(&dirs)?),
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use purge_cli::commands::{
    analyze_cmd, simulate_cmd, train, unlearn_cmd, AnalyzeArgs, SimulateArgs, TrainArgs,
    UnlearnArgs,
};
use purge_cli::CliResult;

#[derive(Parser)]
#[command(name = "purge", version, about = "Exact unlearning for sharded teacher/student distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher ensemble and student network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config field, e.g. `student.mode=naive_sisa`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Train student constituents concurrently. Results are unchanged.
        #[arg(long)]
        parallel: bool,
    },
    /// Apply an unlearning request stream to a trained run directory.
    Unlearn {
        /// Run directory written by `train`.
        #[arg(long)]
        system: PathBuf,
        /// Request CSV; defaults to the run's requests.csv.
        #[arg(long)]
        requests: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check every request against a from-scratch retrain.
        #[arg(long)]
        verify: bool,
        /// Delete superseded checkpoint generations. By default every
        /// generation is kept.
        #[arg(long)]
        prune: bool,
    },
    /// Step-count simulation of teacher-side requests over a parameter grid.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Summarise run directories and simulation tables.
    Analyze {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            sets,
            parallel,
        } => {
            let dir = train(TrainArgs {
                config: config.as_deref(),
                out: out.as_deref(),
                seed,
                sets: &sets,
                parallel,
            })?;
            println!("trained system written to {}", dir.display());
        }
        Command::Unlearn {
            system,
            requests,
            out,
            verify,
            prune,
        } => {
            let reports = unlearn_cmd(UnlearnArgs {
                system: &system,
                requests: requests.as_deref(),
                out: out.as_deref(),
                verify,
                prune,
            })?;
            let steps: u64 = reports.iter().map(|r| r.steps.student).sum();
            println!("{} requests applied, {steps} student steps", reports.len());
        }
        Command::Simulate {
            config,
            out,
            seed,
            sets,
        } => {
            let rows = simulate_cmd(SimulateArgs {
                config: config.as_deref(),
                out: &out,
                seed,
                sets: &sets,
            })?;
            for (row, _) in &rows {
                let pred = row.predicted.map_or("-".to_string(), |p| format!("{p:.3}"));
                println!(
                    "M={} N={} r={} measured={:.3} predicted={pred}",
                    row.m, row.n, row.r, row.measured_ratio
                );
            }
        }
        Command::Analyze { inputs, out } => {
            let (acc, speed) = analyze_cmd(AnalyzeArgs {
                inputs: &inputs,
                out: &out,
            })?;
            println!("{} accuracy rows, {} speed-up rows", acc.len(), speed.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use selfcal::runner::{self, ExperimentConfig, RunError, RunStatus};

#[derive(Parser)]
#[command(name = "selfcal", version, about = "Self-improvement calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and write its run directory.
    Run {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a run directory and check it against its transcripts.
    Report {
        /// Run directory written by `run`
        #[arg(long)]
        run: PathBuf,
    },
    /// Draw trajectory and reliability charts for a run directory.
    Plot {
        /// Run directory written by `run`
        #[arg(long)]
        run: PathBuf,
    },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code.clamp(0, 255) as u8)
}

fn fail(err: &RunError) -> ExitCode {
    eprintln!("error: {err}");
    exit(err.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e.into()),
            };
            let Some(out) = runner::output_dir(&cfg, out.as_deref()) else {
                eprintln!("error: no output directory: pass --out or set output_dir in the config");
                return exit(2);
            };
            match runner::run(&cfg, &out, seed) {
                Ok(record) => {
                    match record.status {
                        RunStatus::Completed => println!("run complete: {}", out.display()),
                        status => {
                            eprintln!("run {status:?}: {} failed queries", record.errors.len());
                            if let Some(first) = record.errors.first() {
                                eprintln!(
                                    "first failure: {} (round {}): {}",
                                    first.query_id, first.round, first.error
                                );
                            }
                        }
                    }
                    exit(record.exit_code())
                }
                Err(e) => fail(&e),
            }
        }
        Command::Report { run } => match runner::report(&run) {
            Ok(report) => {
                print!("{}", report.text);
                if report.mismatches.is_empty() {
                    exit(0)
                } else {
                    exit(1)
                }
            }
            Err(e) => fail(&e),
        },
        Command::Plot { run } => match runner::plot(&run).context("plotting failed") {
            Ok(files) => {
                println!("{}\n{}", files.trajectory.display(), files.reliability.display());
                exit(0)
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                exit(1)
            }
        },
    }
}

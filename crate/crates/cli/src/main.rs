//! `streamsgd` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 infeasible tile
//! plan, 3 equivalence failure, 4 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use streamsgd::config::ExperimentConfig;
use streamsgd::experiment::{run_bench, run_plan, run_train, run_verify};
use streamsgd::{DType, Error};

#[derive(Parser, Debug)]
#[command(name = "streamsgd", version, about = "Tile-streamed CNN training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured precision.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Output directory (defaults to the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Print the tile plan and the memory estimates.
    Plan,
    /// Compare whole-image and streaming training step by step.
    Verify,
    /// Train in the configured mode.
    Train,
    /// Time both executors.
    Bench,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Precision {
    Single,
    Double,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_PLAN: u8 = 2;
const EXIT_EQUIVALENCE: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Plan(_) => EXIT_PLAN,
        Error::Nondeterminism(_) => EXIT_EQUIVALENCE,
        Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::Single => DType::Single,
            Precision::Double => DType::Double,
        };
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = load(cli)?;
    let out = cfg.out_dir.clone();
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Plan => {
            let report = run_plan(&cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("plan.json"), report.plan.to_json()?)?;
            let memory = serde_json::json!({
                "whole_image": report.whole_image,
                "streaming": report.streaming,
                "reduction_percent": report.reduction_percent,
            });
            std::fs::write(out.join("memory.json"), serde_json::to_string_pretty(&memory)?)?;
            println!("{}", report.plan.to_json()?);
            print!("{}", report.whole_image.table());
            print!("{}", report.streaming.table());
            println!(
                "tiles {} ({}), reduction {:.2}%",
                report.plan.tiles.len(),
                report.plan.grid,
                report.reduction_percent
            );
            Ok(0)
        }
        Command::Verify => {
            let report = run_verify(&cfg, &out, threads)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            match &report.failure {
                None => Ok(0),
                Some(name) => {
                    eprintln!("equivalence failure: {name}");
                    Ok(EXIT_EQUIVALENCE)
                }
            }
        }
        Command::Train => {
            let report = run_train(&cfg, &out, threads)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Bench => {
            let report = run_bench(&cfg, threads)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `cacgen`: generate images from scene specs, evaluate runs, and sweep the
//! region-wise (MD) ratio.

mod ablate;
mod evaluate;
mod generate;
mod options;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::options::Threads;

#[derive(Debug, Parser)]
#[command(name = "cacgen", version, about)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "CACGEN_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample one image per seed from a scene file.
    Generate(generate::GenerateArgs),
    /// Rerun a `generate` manifest, optionally checking byte identity.
    Replay(generate::ReplayArgs),
    /// Score a run directory against its ground truth.
    Eval(evaluate::EvalArgs),
    /// Sweep the MD ratio with and without attention control.
    Ablate(ablate::AblateArgs),
    /// Generate and score one of the synthetic benchmarks.
    Benchmark(evaluate::BenchmarkArgs),
}

fn run(cli: Cli) -> Result<()> {
    let threads = Threads::configure(cli.threads)?;
    match cli.command {
        Command::Generate(a) => generate::run(&a, threads),
        Command::Replay(a) => generate::replay(&a, threads),
        Command::Eval(a) => evaluate::run(&a, threads),
        Command::Ablate(a) => ablate::run(&a, threads),
        Command::Benchmark(a) => evaluate::benchmark(&a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

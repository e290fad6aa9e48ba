use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use crowdfuse_cli::selftest::{run_selftest, Subjects};
use crowdfuse_cli::sweep::{run_sweep, SweepOptions};
use crowdfuse_cli::{exit_code_for, with_jobs, ExperimentConfig, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "crowdfuse", version, about = "Simulation harness for crowdsourced estimate aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every configured policy over the K × t × replicate grid.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Reuse finished replicates from an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Worker threads (default: all cores).
        #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: Option<u16>,
        /// Use 50 evaluation and 60 tuning replicates.
        #[arg(long)]
        full_seeds: bool,
    },
    /// Grid-search PEW or EM hyperparameters.
    Tune {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: Option<u16>,
        #[arg(long)]
        full_seeds: bool,
    },
    /// Workers each policy needs to match averaging over a baseline pool.
    Fig2 {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: Option<u16>,
        #[arg(long)]
        full_seeds: bool,
    },
    /// Fast invariant checks.
    Selftest,
}

fn load(path: &Path, full_seeds: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    if full_seeds {
        cfg.use_full_seed_counts();
    }
    Ok(cfg)
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sweep { config, resume, jobs, full_seeds } => {
            let cfg = load(&config, full_seeds)?;
            let summary = with_jobs(jobs.map(usize::from), || run_sweep(&cfg, SweepOptions { resume }))?;
            report(&summary.files);
            println!("{} replicates computed, {} reused", summary.units_computed, summary.units_reused);
        }
        Command::Tune { config, jobs, full_seeds } => {
            let cfg = load(&config, full_seeds)?;
            report(&with_jobs(jobs.map(usize::from), || crowdfuse_cli::tune::run_tune(&cfg))?);
        }
        Command::Fig2 { config, jobs, full_seeds } => {
            let cfg = load(&config, full_seeds)?;
            report(&[with_jobs(jobs.map(usize::from), || crowdfuse_cli::fig2::run_fig2(&cfg))?]);
        }
        Command::Selftest => return Ok(run_selftest(&Subjects::default())),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

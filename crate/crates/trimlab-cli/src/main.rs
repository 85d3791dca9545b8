//! Command-line front end: `run` executes a sweep, `report` regenerates the
//! output files from existing records, `inspect` prints a checkpoint's
//! resource footprint, and `verify` runs a fast oracle self-check.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trimlab::checkpoint;
use trimlab::sweep::{self, ExperimentConfig};
use trimlab::verify;

#[derive(Parser)]
#[command(
    name = "trimlab",
    version,
    about = "Iterative structured-pruning laboratory for small audio networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the configured sweep, resuming any completed runs on disk.
    Run(RunArgs),
    /// Rebuild curves.csv, table.csv, and summary.txt from stored records.
    Report {
        /// Output directory of a previous `run`.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Print the parameter, disk, FLOP, and memory footprint of a model
    /// checkpoint.
    Inspect {
        /// Path to a checkpoint written during a sweep.
        checkpoint: PathBuf,
    },
    /// Run the oracle self-check: finite-difference gradients, trim versus
    /// zero-mask equivalence, ranking, and rewind restoration.
    Verify {
        /// Random shape draws per operation.
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML); omitted fields use the reference
    /// protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict the sweep to one task.
    #[arg(long)]
    task: Option<String>,
    /// Restrict the sweep to one strategy (trim|mask|finetune).
    #[arg(long)]
    strategy: Option<String>,
    /// Restrict the sweep to one criterion (magnitude|activation|batchnorm).
    #[arg(long)]
    criterion: Option<String>,
    /// Ranking scope (local|global).
    #[arg(long)]
    scope: Option<String>,
    /// Base seed for the whole sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for records and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock seconds per pass (makes records machine-dependent).
    #[arg(long)]
    timing: bool,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(args) => run(args),
        Cmd::Report { out } => report(out),
        Cmd::Inspect { checkpoint } => inspect(checkpoint),
        Cmd::Verify { rounds, seed } => verify_cmd(rounds, seed),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => sweep::parse_config(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(
        args.task.as_deref(),
        args.strategy.as_deref(),
        args.criterion.as_deref(),
        args.scope.as_deref(),
        args.seed,
        args.out.as_deref(),
    )?;
    if args.timing {
        cfg.timing = true;
    }

    let outcome = sweep::run_sweep(&cfg)?;
    println!(
        "completed {} runs, reused {} finished runs, {} failed",
        outcome.completed.len(),
        outcome.skipped.len(),
        outcome.failed.len()
    );
    println!("{} records in {}", outcome.records.len(), cfg.out_dir.join("curves.csv").display());
    if !outcome.failed.is_empty() {
        for (run, msg) in &outcome.failed {
            eprintln!("failed: {}: {msg}", run.id());
        }
        bail!(
            "{} of {} runs failed; details in {}",
            outcome.failed.len(),
            outcome.failed.len() + outcome.completed.len() + outcome.skipped.len(),
            cfg.out_dir.join("quarantine").display()
        );
    }
    Ok(())
}

fn report(out: PathBuf) -> Result<()> {
    let report = sweep::regenerate_reports(&out)
        .with_context(|| format!("reporting on {}", out.display()))?;
    println!(
        "wrote curves.csv, table.csv, summary.txt for {} run groups in {}",
        report.groups.len(),
        out.display()
    );
    Ok(())
}

fn inspect(path: PathBuf) -> Result<()> {
    let model = checkpoint::load_model(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let cost = checkpoint::cost_report(&model)?;
    println!("{}", path.display());
    println!("{cost}");
    Ok(())
}

fn verify_cmd(rounds: usize, seed: u64) -> Result<()> {
    for line in verify::quick_suite(seed, rounds)? {
        println!("ok  {line}");
    }
    println!("all checks passed");
    Ok(())
}

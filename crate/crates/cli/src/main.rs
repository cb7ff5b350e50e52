//! Command-line front end: experiment sweeps, feature-dump analysis,
//! dynamics simulation, and the built-in acceptance suite.

mod analyze;
mod config;
mod dump;
mod error;
mod run;
mod simulate;

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analyze::Metric;
use crate::config::{ExperimentConfig, SimulateConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "collapselab",
    version,
    about = "Collapse geometry, replay dynamics, and continual-learning protocols"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continual-learning sweep described by a config file
    Run(RunArgs),
    /// Compute metric tables from a feature dump CSV
    Analyze(AnalyzeArgs),
    /// Compare closed-form dynamics predictors against Monte-Carlo samplers
    Simulate(SimulateArgs),
    /// Run the built-in acceptance suite (exits nonzero on any failure)
    Validate,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `dir` under [output])
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep points (fallback: COLLAPSELAB_JOBS, then
    /// the number of CPUs)
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Feature dump CSV (header `task,class,split,f0,...`)
    dump: PathBuf,
    /// Which table to compute
    #[arg(long, value_enum)]
    metric: Metric,
    /// Write the table here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dynamics config file
    #[arg(long)]
    config: PathBuf,
    /// Write the sweep CSV here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Command::Run(args) => cmd_run(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate => cmd_validate(),
    }
}

fn read_config(path: &PathBuf) -> CliResult<(String, String)> {
    let source = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{source}: {e}")))?;
    Ok((source, text))
}

fn effective_jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("COLLAPSELAB_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .filter(|&j| j > 0)
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn emit(out: Option<PathBuf>, table: &str) -> CliResult<()> {
    match out {
        Some(path) => dump::atomic_write(&path, table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let (source, text) = read_config(&args.config)?;
    let mut cfg = ExperimentConfig::parse(&source, &text)?;
    if let Some(seed) = args.seed_override {
        cfg.seeds = vec![seed];
    }
    let out_dir = run::resolve_out_dir(&cfg, args.out)?;
    let jobs = effective_jobs(args.jobs);
    collapselab::exec::configure_jobs(jobs);
    run::cmd_run(&cfg, &out_dir, jobs)
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult<()> {
    let data = dump::load_dump(&args.dump)?;
    let table = analyze::cmd_analyze(&data, args.metric)?;
    emit(args.out, &table)
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let (source, text) = read_config(&args.config)?;
    let cfg = SimulateConfig::parse(&source, &text)?;
    let table = simulate::cmd_simulate(&cfg, &source)?;
    emit(args.out, &table)
}

fn cmd_validate() -> CliResult<()> {
    let results = collapselab::acceptance::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{failed} of {} acceptance criteria failed",
            results.len()
        )))
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cgm_sbp::config::{Method, ReportFormat, ScenarioConfig};
use cgm_sbp::experiment::{run_config, Execution, RunOptions};
use cgm_sbp::report::{emit_report, render};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cgm-sbp", version, about = "Sliding-window Sinkhorn belief propagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Methods to run (repeatable or comma separated): baseline, naive, swsbp1, swsbp2.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    /// Window length.
    #[arg(long = "K")]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Certify baseline marginals against the brute-force oracle (tiny instances only).
    #[arg(long)]
    oracle_check: bool,
    /// Output path; stdout when absent from both the flag and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "json"])]
    format: Option<String>,
    /// Run trials one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::from_file(&args.config)?;
    config.apply_overrides(&args.overrides)?;
    if !args.methods.is_empty() {
        let mut methods = args.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
        methods.sort();
        methods.dedup();
        config.methods = methods;
    }
    if let Some(k) = args.window {
        config.window = k;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    if let Some(format) = &args.format {
        config.format = format.parse::<ReportFormat>()?;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<()> {
    let config = load_config(&args).with_context(|| format!("loading {}", args.config.display()))?;
    let options = RunOptions {
        execution: if args.sequential { Execution::Sequential } else { Execution::Parallel },
        oracle_check: args.oracle_check,
    };
    let report = run_config(&config, options)?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    match &config.out {
        Some(path) => {
            emit_report(&report, config.format, path)?;
            eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
        }
        None => print!("{}", render(&report, config.format)?),
    }
    if failed > 0 {
        eprintln!("warning: {failed} rows recorded errors");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

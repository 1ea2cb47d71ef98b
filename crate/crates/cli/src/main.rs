//! Command-line driver for the simulation and evaluation pipeline.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rmab_trial::config::ExperimentConfig;
use rmab_trial::pipeline;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "rmab-trial",
    version,
    about = "Simulate an intervention-scheduling trial and evaluate its outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Output directory; overrides the config's `experiment.output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides the config's `experiment.master_seed`.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Log errors only.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run simulate, analyze, and report in one go.
    Run(StageArgs),
    /// Generate the population, run the trial, persist raw artifacts.
    Simulate(StageArgs),
    /// Match counterfactual pairs and write the comparison tables.
    Analyze(StageArgs),
    /// Render the analysis tables into report.txt.
    Report(StageArgs),
}

impl Command {
    fn stage_args(&self) -> &StageArgs {
        match self {
            Command::Run(args)
            | Command::Simulate(args)
            | Command::Analyze(args)
            | Command::Report(args) => args,
        }
    }
}

fn effective_config(args: &StageArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(out) = &args.out {
        config.experiment.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.experiment.master_seed = seed;
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let args = cli.command.stage_args();

    let level = if args.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let config = effective_config(args)?;
    match &cli.command {
        Command::Run(_) => pipeline::run_pipeline(&config)?,
        Command::Simulate(_) => pipeline::stage_simulate(&config)?,
        Command::Analyze(_) => pipeline::stage_analyze(&config)?,
        Command::Report(_) => pipeline::stage_report(&config)?,
    }
    if !args.quiet {
        log::info!(
            "artifacts in {}",
            config.experiment.output_dir.display()
        );
    }
    Ok(())
}

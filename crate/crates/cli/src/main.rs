use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use muir::experiment::{cmd_analyze, run_experiment, ExperimentConfig, ExperimentKind, RunOutcome};

#[derive(Parser)]
#[command(name = "muir", version, about = "Pseudo-task alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grouped linear-regression benchmark over setups and seeds.
    Synthetic(RunArgs),
    /// Decomposed EA sweeps and scaling fits.
    Theory(RunArgs),
    /// Block counts for architecture files.
    Decompose(RunArgs),
    /// Generality statistics of a finished run; `--config` may name the run
    /// directory itself.
    Analyze(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed list, e.g. `--seeds 0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn load(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.kind != kind {
        bail!(
            "{} declares kind {:?} but the {:?} command was used",
            args.config.display(),
            config.kind,
            kind
        );
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    config.validate().context("invalid config")?;
    Ok(config)
}

fn run(cli: Cli) -> Result<RunOutcome> {
    let (kind, args) = match &cli.command {
        Command::Synthetic(a) => (ExperimentKind::Synthetic, a),
        Command::Theory(a) => (ExperimentKind::Theory, a),
        Command::Decompose(a) => (ExperimentKind::Decompose, a),
        Command::Analyze(a) => (ExperimentKind::Analyze, a),
    };
    if kind == ExperimentKind::Analyze && args.config.is_dir() {
        return Ok(cmd_analyze(&args.config, args.out.as_deref())?);
    }
    let config = load(kind, args)?;
    Ok(run_experiment(&config)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", outcome.dir.display());
            if outcome.succeeded() {
                return ExitCode::SUCCESS;
            }
            for f in &outcome.manifest.failed {
                eprintln!(
                    "failed: setup={} seed={}: {}",
                    f.setup.as_deref().unwrap_or("-"),
                    f.seed.map_or("-".to_string(), |s| s.to_string()),
                    f.error
                );
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

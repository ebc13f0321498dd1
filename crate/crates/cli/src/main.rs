mod ablate;
mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fgdi_core::evalkit::EvalError;
use fgdi_core::pipeline::PipelineError;
use fgdi_core::synthdata::DataError;

use crate::ablate::Grid;
use crate::commands::{EvalArgs, TrainArgs};
use crate::config::{ConfigError, ExperimentConfig};

/// Training, evaluation and ablation runner for domain-generalizable
/// prompt-learned person re-identification on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "fgdi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (JSON). Built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the full-length stage schedule instead of the configured one.
    #[arg(long)]
    full_epochs: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic dataset archives, one per seed.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train every seed, writing checkpoints, metric logs and reports.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of fresh parameters.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Refuse to start if the estimated runtime exceeds this.
        #[arg(long)]
        budget_minutes: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset archive and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump query and gallery features into this directory.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Run ablation arms and parameter sweeps; writes CSV and plot data.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grids to run; defaults to those listed in the config's sweep section.
        #[arg(long, value_enum)]
        grid: Vec<Grid>,
        #[arg(long)]
        budget_minutes: Option<f64>,
    },
    /// Aggregate seed reports under a run directory.
    Report { dir: PathBuf },
    /// Print the default experiment config.
    DefaultConfig,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.with_flags(common.seed, common.full_epochs);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load(&common)?;
            let out = commands::out_dir(common.out, &cfg)?;
            commands::cmd_synth(&cfg, &out)
        }
        Command::Train {
            common,
            resume,
            budget_minutes,
        } => {
            let cfg = load(&common)?;
            let out = commands::out_dir(common.out, &cfg)?;
            commands::cmd_train(
                &cfg,
                TrainArgs {
                    out: &out,
                    resume_from: resume.as_deref(),
                    budget_minutes,
                },
            )
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            features,
        } => {
            let report = commands::cmd_eval(EvalArgs {
                checkpoint: &checkpoint,
                dataset: &dataset,
                out: out.as_deref(),
                features: features.as_deref(),
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ablate {
            common,
            grid,
            budget_minutes,
        } => {
            let cfg = load(&common)?;
            let out = commands::out_dir(common.out, &cfg)?;
            ablate::cmd_ablate(&cfg, &grid, &out, budget_minutes)?;
            print!("{}", report::cmd_report(&out)?);
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", report::cmd_report(&dir)?);
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", ExperimentConfig::default().to_pretty_json());
            Ok(())
        }
    }
}

/// 1 for configuration problems, 2 for numerical aborts, 3 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return pipeline_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Pipeline(p) => pipeline_code(p),
                EvalError::Data(d) => data_code(d),
                EvalError::Io { .. } => 3,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<walkdir::Error>() {
            return 3;
        }
    }
    1
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::NonFinite { .. } => 2,
        PipelineError::Io { .. } => 3,
        PipelineError::Data(d) => data_code(d),
        _ => 1,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

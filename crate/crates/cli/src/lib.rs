//! Command-line front end: argument parsing, layered configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod exit;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::{Counter, ModelKind};

#[derive(Debug, Parser)]
#[command(name = "sylnet", version, about = "Syllable counting from speech audio")]
pub struct Cli {
    /// Layered TOML config file; later files override earlier ones.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=3e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed for every random stream in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CounterArgs {
    /// Neural checkpoint (`.safetensors` with its `.toml` sidecar).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Envelope calibration file written by `calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic burst corpus with exact syllable counts.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and cache features for every utterance of a manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Train a counting network from scratch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "sylnet")]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Retrain the adaptable part of a checkpoint on a small target corpus.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Print `path<TAB>count<TAB>raw` for each WAV file (directories are searched recursively).
    Count {
        #[command(flatten)]
        counter: CounterArgs,
        inputs: Vec<PathBuf>,
    },
    /// Fit the envelope peak threshold and linear count map on a manifest.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        /// Calibration TOML to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or calibration on a manifest.
    Evaluate {
        #[command(flatten)]
        counter: CounterArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-utterance accumulation traces (neural models only).
        #[arg(long)]
        traces: bool,
    },
    /// Adaptation-curve experiment over the sizes and folds of `[split]`.
    Experiment {
        #[arg(long)]
        manifest: PathBuf,
        /// `name=path` of a checkpoint (`.safetensors`) or calibration (`.toml`); repeatable.
        #[arg(long = "method", value_name = "NAME=PATH")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Draw an experiment report or an accumulation trace as SVG plus CSV.
    Plot {
        /// `report.json` from `experiment` or a trace from `evaluate --traces`.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = config::resolve(&cli.configs, &cli.overrides, cli.seed)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Extract { manifest, cache } => commands::extract(&cfg, &manifest, &cache),
        Command::Train {
            manifest,
            model,
            out,
            cache,
        } => commands::train_model(&cfg, &manifest, model, &out, cache.as_deref()),
        Command::Adapt {
            checkpoint,
            manifest,
            out,
            cache,
        } => commands::adapt_model(&cfg, &checkpoint, &manifest, &out, cache.as_deref()),
        Command::Count { counter, inputs } => {
            commands::expand_inputs(&inputs)?;
            let c = Counter::load(counter.checkpoint.as_deref(), counter.calibration.as_deref())?;
            commands::count(&c, &inputs)
        }
        Command::Calibrate { manifest, out } => commands::calibrate_envelope(&cfg, &manifest, &out),
        Command::Evaluate {
            counter,
            manifest,
            out,
            traces,
        } => {
            let c = Counter::load(counter.checkpoint.as_deref(), counter.calibration.as_deref())?;
            commands::evaluate(&cfg, &c, &manifest, &out, traces)
        }
        Command::Experiment {
            manifest,
            methods,
            out,
            cache,
        } => commands::experiment(&cfg, &manifest, &methods, &out, cache.as_deref()),
        Command::Plot { input, out } => {
            for p in plot::plot(&input, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

//! Command-line driver for the synthetic biasing experiments.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mtpbias", version, about = "Multi-token-prediction contextual biasing on a synthetic corpus")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set corpus.noise_sigma=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for decoding.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reports_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Generate {
        /// Output directory (defaults to paths.corpus_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the corpus.
    Train {
        /// Continue from the last checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
        /// Per-head loss weights, comma separated.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f32>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Decode a split and write hypotheses.
    Decode {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Bias list file used for every utterance.
        #[arg(long)]
        bias_list: Option<PathBuf>,
        /// Per-utterance list size when no bias list file is given.
        #[arg(long, default_value_t = 0)]
        list_size: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Evaluate every requested bias-list size and (λ, γ) setting.
    Eval {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Bias-list sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        list_sizes: Option<Vec<usize>>,
    },
    /// Tune (λ, γ) on dev, then sweep λ on test at `decode.gamma`.
    Sweep {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Biasing weights of the sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Train and score the ablation rows.
    Ablate {
        /// Rows to run, comma separated (A0, A1, B0, B1, B2, B3).
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
    },
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Checkpoint stem (defaults to `<paths.checkpoint_dir>/best`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Decode only the first N utterances.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(j) = cli.common.jobs {
        cfg.eval.settings.jobs = j;
    }
    if let Some(d) = &cli.common.corpus_dir {
        cfg.paths.corpus_dir = d.clone();
    }
    if let Some(d) = &cli.common.reports_dir {
        cfg.paths.reports_dir = d.clone();
    }
    match &cli.command {
        Command::Train {
            alpha,
            epochs,
            checkpoint_dir,
            ..
        } => {
            if let Some(a) = alpha {
                cfg.training.alpha = a.clone();
            }
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
            if let Some(d) = checkpoint_dir {
                cfg.paths.checkpoint_dir = d.clone();
            }
        }
        Command::Decode { decode, .. } | Command::Eval { decode, .. } | Command::Sweep { decode, .. } => {
            if let Some(l) = decode.lambda {
                cfg.decode.lambda = l;
                cfg.eval.lambdas.clear();
            }
            if let Some(g) = decode.gamma {
                cfg.decode.gamma = g;
                cfg.eval.gammas.clear();
            }
            if let Some(m) = decode.max_len {
                cfg.decode.max_len = m;
            }
            if decode.limit.is_some() {
                cfg.eval.settings.limit = decode.limit;
            }
        }
        Command::Generate { .. } | Command::Ablate { .. } => {}
    }
    if let Command::Eval {
        list_sizes: Some(s), ..
    } = &cli.command
    {
        cfg.eval.list_sizes = s.clone();
    }
    if let Command::Sweep { lambdas: Some(l), .. } = &cli.command {
        cfg.eval.sweep_lambdas = l.clone();
    }
    if let Command::Ablate { rows: Some(r) } = &cli.command {
        cfg.eval.rows = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate { out } => commands::generate(&cfg, out.as_deref()),
        Command::Train { resume, .. } => commands::train(&cfg, *resume),
        Command::Decode {
            decode,
            bias_list,
            list_size,
            split,
        } => commands::decode(&cfg, decode.checkpoint.as_deref(), bias_list.as_deref(), *list_size, split),
        Command::Eval { decode, .. } => commands::eval(&cfg, decode.checkpoint.as_deref()),
        Command::Sweep { decode, .. } => commands::sweep(&cfg, decode.checkpoint.as_deref()),
        Command::Ablate { .. } => commands::ablate(&cfg),
    }
}

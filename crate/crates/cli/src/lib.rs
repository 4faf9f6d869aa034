//! Command-line front end: dataset splits, stain normalization, learning-rate
//! search, training, evaluation, explanation and benchmarking.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "htxc", version, about = "Colorectal histology texture classification pipeline")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set train.lr_max=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset root (same as `--set data.root=...`).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a class-per-directory tree and write a stratified split file.
    Split {
        #[arg(long, default_value = "split.tsv")]
        out: PathBuf,
    },
    /// Fit a stain model to a target image or apply one to an image tree.
    Stain {
        #[command(subcommand)]
        action: StainAction,
    },
    /// Learning-rate range test on the training split.
    Lrfind {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "lrfind")]
        out: PathBuf,
    },
    /// Staged training with checkpoints and an epoch log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Backbone weights to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Continue from `<out>/last.htxc`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Accuracy, confusion matrix and ROC curves of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        subset: String,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Grad-CAM overlays and raw maps for individual images.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class name or index; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        stain_model: Option<PathBuf>,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Batch inference timing.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Write a procedurally generated 8-class texture tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Split file written by `htxc split`.
    #[arg(long, default_value = "split.tsv")]
    pub split: PathBuf,
    /// Stain model applied to every image before resizing.
    #[arg(long)]
    pub stain_model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StainAction {
    /// Fit the target stain basis and density percentiles.
    Fit {
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "stain.txt")]
        out: PathBuf,
    },
    /// Normalize every image under `input` into a mirrored tree at `output`.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(root) = &self.root {
            cfg.data_root = Some(root.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    execute(&Cli::try_parse_from(args)?)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Split { out } => commands::split(&cfg, out),
        Command::Stain { action } => match action {
            StainAction::Fit { target, out } => commands::stain_fit(&cfg, target, out),
            StainAction::Apply { model, input, output } => commands::stain_apply(&cfg, model, input, output),
        },
        Command::Lrfind { data, out } => commands::lrfind(&cfg, data, out),
        Command::Train {
            data,
            out,
            pretrained,
            resume,
            stop_after,
        } => commands::train(&cfg, data, out, pretrained.as_deref(), *resume, *stop_after),
        Command::Eval {
            data,
            checkpoint,
            subset,
            out,
        } => commands::eval(&cfg, data, checkpoint, subset, out),
        Command::Explain {
            checkpoint,
            class,
            stain_model,
            out,
            images,
        } => commands::explain(&cfg, checkpoint, class.as_deref(), stain_model.as_deref(), out, images),
        Command::Bench { checkpoint, out } => commands::bench(&cfg, checkpoint, out),
        Command::Synth { out, per_class } => commands::synth(&cfg, out, *per_class),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

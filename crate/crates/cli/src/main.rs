//! `nowcast`: synthetic data, training, prediction, evaluation, parameter
//! audits and frame rendering for the U-Net family of nowcasting models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nowcast_core::{Error, ErrorClass, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Precipitation nowcasting with attention U-Nets")]
struct Cli {
    /// Flat key=value config file, applied before `--set` and flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives bit-exact reruns; 0 uses every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Any config key, e.g. `-s epochs=3 -s base_width=16`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic advecting-blob dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train a model; writes checkpoints, a loss manifest and the resolved config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Predict one window and write the de-normalized frames as a dataset file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// First input frame of the window.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Score checkpoints, ensembles and persistence; writes report.txt and report.csv.
    Evaluate {
        #[arg(long = "checkpoint", num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `NAME=i,j,...` over checkpoint positions (0-based); repeatable.
        #[arg(long)]
        ensemble: Vec<String>,
        /// train, valid, test (default) or all.
        #[arg(long)]
        split: Option<String>,
        /// Score a single window starting at this frame instead of a split.
        #[arg(long)]
        window: Option<usize>,
        /// Score a file written by `predict` (requires `--window`).
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Print parameter counts.
    Params {
        #[arg(long)]
        variant: Option<String>,
        /// All four variants, sorted by size.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Write grayscale PGM panels for frames of a dataset or prediction file.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `0,3,7`, `2..6` or `all`.
        #[arg(long)]
        frames: Option<String>,
        /// Dynamic channels, same syntax; default all.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
}

fn put(cfg: &mut RunConfig, key: &str, v: Option<impl ToString>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::defaults();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    let overrides = match &cli.cmd {
        Cmd::Synth { o, .. }
        | Cmd::Train { o, .. }
        | Cmd::Predict { o, .. }
        | Cmd::Evaluate { o, .. }
        | Cmd::Params { o, .. }
        | Cmd::Render { o, .. } => o.set.clone(),
    };
    for pair in &overrides {
        cfg.set_pair(pair)?;
    }
    put(&mut cfg, "seed", cli.seed)?;
    put(&mut cfg, "threads", cli.threads)?;
    put(&mut cfg, "dtype", cli.dtype)?;

    let threads: usize = cfg.parse("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    cfg.dtype()?;

    match cli.cmd {
        Cmd::Synth { out, .. } => {
            put(&mut cfg, "out", path(out))?;
            commands::synth(&cfg)
        }
        Cmd::Train { data, out, variant, epochs, .. } => {
            put(&mut cfg, "data", path(data))?;
            put(&mut cfg, "out", path(out))?;
            put(&mut cfg, "variant", variant)?;
            put(&mut cfg, "epochs", epochs)?;
            commands::train(&cfg)
        }
        Cmd::Predict { checkpoint, data, window, out, .. } => {
            put(&mut cfg, "checkpoints", path(checkpoint))?;
            put(&mut cfg, "data", path(data))?;
            put(&mut cfg, "window", window)?;
            put(&mut cfg, "out", path(out))?;
            commands::predict(&cfg)
        }
        Cmd::Evaluate { checkpoints, data, out, ensemble, split, window, prediction, .. } => {
            if !checkpoints.is_empty() {
                let joined: Vec<String> = checkpoints.into_iter().filter_map(|p| path(Some(p))).collect();
                cfg.set("checkpoints", &joined.join(","))?;
            }
            if !ensemble.is_empty() {
                cfg.set("ensembles", &ensemble.join(";"))?;
            }
            put(&mut cfg, "data", path(data))?;
            put(&mut cfg, "out", path(out))?;
            put(&mut cfg, "split", split)?;
            put(&mut cfg, "window", window)?;
            put(&mut cfg, "prediction", path(prediction))?;
            commands::evaluate(&cfg)
        }
        Cmd::Params { variant, all, .. } => {
            put(&mut cfg, "variant", variant)?;
            commands::params(&cfg, all)
        }
        Cmd::Render { data, frames, channels, out, .. } => {
            put(&mut cfg, "data", path(data))?;
            put(&mut cfg, "frames", frames)?;
            put(&mut cfg, "channels", channels)?;
            put(&mut cfg, "out", path(out))?;
            commands::render(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

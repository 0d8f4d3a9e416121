//! Command-line driver: synthesize data, preprocess, train, evaluate, predict
//! and check gradients.
//!
//! Settings resolve as defaults, then the `--config` file, then `--set
//! KEY=VALUE` overrides, then dedicated flags.

pub mod checksums;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_preprocess, cmd_synth, cmd_train, load_model,
    EvalReport, PreprocessReport, SynthReport, TrainReport,
};
pub use config::{Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rainunet",
    version,
    about = "Precipitation nowcasting with a factorized 3D U-Net"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Select channels, drop non-rainy sequences and crop inputs.
    Preprocess,
    /// Train a model; writes checkpoints and a loss log.
    Train,
    /// Score a checkpoint; writes metrics.csv and lead_time.csv.
    Evaluate,
    /// Write per-sequence probability maps and masks.
    Predict,
    /// Compare every backward rule against finite differences.
    Gradcheck {
        /// Use this tolerance for every check.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seeds: Option<u64>,
    },
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// `key = value` file applied over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override any setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input dataset directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Input crop as a multiple of the target region, 1 to 6.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=6))]
    pub crop_factor: Option<u64>,
    /// ir, ir+vis, ir+wv or ir+vis+wv.
    #[arg(long, global = true)]
    pub channels: Option<String>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Enable weight averaging.
    #[arg(long, global = true)]
    pub swa: bool,
    /// First epoch whose weights are averaged.
    #[arg(long, global = true)]
    pub swa_start: Option<usize>,
    /// standard (32-bit) or wide (64-bit).
    #[arg(long, global = true)]
    pub precision: Option<String>,
}

impl CommonArgs {
    /// Dedicated flags as `(key, value)` pairs.
    fn flag_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        if let Some(x) = self.seed {
            v.push(("seed", x.to_string()));
        }
        if let Some(x) = &self.data {
            v.push(("data", path(x)));
        }
        if let Some(x) = &self.out {
            v.push(("out", path(x)));
        }
        if let Some(x) = &self.checkpoint {
            v.push(("checkpoint", path(x)));
        }
        if let Some(x) = self.crop_factor {
            v.push(("crop_factor", x.to_string()));
        }
        if let Some(x) = &self.channels {
            v.push(("channels", x.clone()));
        }
        if let Some(x) = self.threshold {
            v.push(("threshold", x.to_string()));
        }
        if let Some(x) = self.epochs {
            v.push(("epochs", x.to_string()));
        }
        if self.swa {
            v.push(("swa", "true".into()));
        }
        if let Some(x) = self.swa_start {
            v.push(("swa_start", x.to_string()));
        }
        if let Some(x) = &self.precision {
            v.push(("precision", x.clone()));
        }
        v
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.set)?;
        for (k, v) in self.flag_pairs() {
            cfg.set(k, &v)?;
        }
        cfg.finish()
    }
}

/// Sizes the worker pool from `RAINUNET_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RAINUNET_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!("RAINUNET_THREADS must be a positive integer, got `{v}`"),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg).map(drop),
        Command::Preprocess => cmd_preprocess(&cfg).map(drop),
        Command::Train => cmd_train(&cfg).map(drop),
        Command::Evaluate => cmd_evaluate(&cfg).map(drop),
        Command::Predict => cmd_predict(&cfg).map(drop),
        Command::Gradcheck { tol, seeds } => {
            if let Some(t) = tol {
                cfg.set("gradcheck_tol", &t.to_string())?;
            }
            if let Some(s) = seeds {
                cfg.set("gradcheck_seeds", &s.to_string())?;
            }
            let cfg = cfg.finish()?;
            if cfg.precision == Precision::Standard {
                println!("gradcheck: running in wide precision");
            }
            cmd_gradcheck(&cfg).map(drop)
        }
    }
}

//! Command-line orchestration of dataset generation, training, Monte-Carlo
//! dilution sweeps, reports and micro-benchmarks.

pub mod bench;
pub mod commands;
pub mod config;
pub mod fmt;
pub mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "freqdrop", version, about = "Signal vs frequency Monte-Carlo dropout experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "FREQDROP_JOBS")]
    pub jobs: Option<usize>,
    /// Write PGM uncertainty and gradient-impact maps (mc).
    #[arg(long, global = true)]
    pub emit_maps: bool,
    /// Output location: dataset directory for generate, model directory for
    /// train, results directory otherwise.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate,
    /// Train the baseline network.
    Train,
    /// Run the dilution sweep.
    Mc,
    /// Time both dilution kinds across map sizes.
    Bench,
    /// Summarize a results directory as markdown.
    Report,
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(command: Command, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.emit_maps {
        cfg.emit_maps = true;
    }
    if let Some(out) = &common.output {
        match command {
            Command::Generate => cfg.dataset = out.clone(),
            Command::Train => cfg.model = out.join("model.fdn"),
            Command::Mc | Command::Bench | Command::Report => cfg.output = out.clone(),
        }
    }
    Ok(cfg)
}

/// Runs one command and returns a one-line human summary.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<String> {
    Ok(match command {
        Command::Generate => {
            let s = commands::cmd_generate(cfg)?;
            format!("wrote {} samples to {}", s.count, s.directory.display())
        }
        Command::Train => {
            let s = commands::cmd_train(cfg)?;
            format!(
                "trained on {} samples, held-out DSC {:.4}, model at {}",
                s.train_samples,
                s.eval_dsc,
                s.model.display()
            )
        }
        Command::Mc => {
            let s = commands::cmd_mc(cfg)?;
            let cmp = match s.comparison.frequency_uce_le_signal {
                Some(true) => "best frequency UCE <= best signal UCE",
                Some(false) => "best frequency UCE > best signal UCE",
                None => "kind comparison unavailable",
            };
            format!(
                "{} configs ({} failed) on {} samples, baseline DSC {:.4}; {cmp}; results in {}",
                s.configs,
                s.failed,
                s.samples,
                s.baseline_dsc,
                s.output.display()
            )
        }
        Command::Bench => {
            let s = bench::cmd_bench(cfg)?;
            let fits: Vec<String> = s
                .fits
                .iter()
                .map(|f| format!("{} slope {:.3}", f.kind, f.slope))
                .collect();
            format!("{} timings; {}", s.timings.len(), fits.join(", "))
        }
        Command::Report => format!("wrote {}", report::cmd_report(cfg)?.display()),
    })
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|cause| {
        cause.downcast_ref::<ConfigError>().is_some()
            || cause
                .downcast_ref::<freqdrop_core::Error>()
                .is_some_and(freqdrop_core::Error::is_config)
    });
    if is_config {
        2
    } else {
        1
    }
}

pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli.command, &cli.common)?;
    let jobs = match cli.common.jobs {
        Some(0) => return Err(config::config_error("--jobs must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| anyhow::anyhow!("cannot start worker pool: {e}"))?;
    pool.install(|| execute(cli.command, &cfg))
}

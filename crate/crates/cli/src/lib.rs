//! `stainprompt` command-line driver.
//!
//! Every verb reads one TOML config (`--config`), writes its outputs plus a
//! `run_manifest.json` into the configured `out` directory, and derives all
//! of its randomness from the top-level `seed`.
//!
//! `lambda` is the structure weight throughout: the prompt objective is
//! `lambda · structural loss + (1 − lambda) · style loss`.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub const CACHE_ENV: &str = "STAINPROMPT_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "stainprompt", version, about = "Stain style transfer with dual-path inversion and optimized visual prompts")]
pub struct Cli {
    /// Command config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Images processed concurrently. Outputs are only guaranteed
    /// bit-identical across runs with a single worker.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Trajectory and prompt cache.
    #[arg(long, global = true, env = CACHE_ENV, value_name = "PATH")]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a paired synthetic corpus.
    GenData,
    /// Train (or resume training) the conditional noise predictor.
    Train,
    /// Transfer a set of images from the source to the target stain.
    Transfer,
    /// Transfer over a grid of lambda or ist_init values.
    Sweep,
    /// Score images against paired ground truth.
    Eval,
    /// Round-trip error against step count for several condition pairs.
    ErrorStudy,
    /// Collect finished runs into one summary.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Transfer => "transfer",
            Command::Sweep => "sweep",
            Command::Eval => "eval",
            Command::ErrorStudy => "error-study",
            Command::Report => "report",
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let Some(config) = cli.config.as_deref() else {
        anyhow::bail!("{} needs --config PATH", cli.command.name());
    };
    if cli.workers == 0 {
        anyhow::bail!("--workers must be at least 1");
    }
    let g = commands::Globals { config, seed: cli.seed, workers: cli.workers, cache_dir: cli.cache_dir.clone() };
    match cli.command {
        Command::GenData => commands::gen_data::run(&g),
        Command::Train => commands::train::run(&g),
        Command::Transfer => commands::transfer::run(&g),
        Command::Sweep => commands::sweep::run(&g),
        Command::Eval => commands::eval::run(&g),
        Command::ErrorStudy => commands::error_study::run(&g),
        Command::Report => commands::report::run(&g),
    }
}

//! Subcommand dispatch shared by the binary and the tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;
use crate::{ablate, eval, model, posttrain, pretrain};

#[derive(Debug, Parser)]
#[command(name = "vgrpo-lab", version, about = "Pretrain, post-train, ablate and evaluate toy flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run root; subcommands write into a subdirectory named after themselves.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Pretrain(Common),
    Posttrain(Common),
    Ablate(Common),
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also run the gradient, sampler and surrogate oracle checks.
        #[arg(long)]
        oracle: bool,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply_overrides(c.seed, c.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn resume(c: &Common) -> Option<&Path> {
    c.resume.as_deref()
}

/// Runs one subcommand; returns the directory it wrote.
pub fn execute(cmd: &Command) -> Result<PathBuf> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg = resolve(c)?;
            let dir = cfg.out_dir.join("pretrain");
            pretrain::run_pretrain(&cfg, resume(c), &dir)?;
            Ok(dir)
        }
        Command::Posttrain(c) => {
            let cfg = resolve(c)?;
            let dir = cfg.out_dir.join("posttrain");
            posttrain::run_posttrain(&cfg, resume(c), &dir)?;
            Ok(dir)
        }
        Command::Ablate(c) => {
            let cfg = resolve(c)?;
            let dir = cfg.out_dir.join("ablate");
            let init = model::load(&cfg, &posttrain::input_checkpoint(&cfg, resume(c)))?;
            model::write_file(&dir.join("config.toml"), cfg.snapshot()?.as_bytes())?;
            ablate::ablate(&cfg, &init, &dir)?;
            Ok(dir)
        }
        Command::Eval { common, oracle } => {
            let cfg = resolve(common)?;
            let dir = cfg.out_dir.join("eval");
            eval::run_eval(&cfg, &eval::input_checkpoint(&cfg, resume(common)), *oracle, &dir)?;
            Ok(dir)
        }
    }
}

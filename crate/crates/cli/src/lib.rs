//! `cimq`: the staged quantization pipeline over files.
//!
//! ```text
//! score → optimize → compress → place → simulate → report
//! ```
//!
//! Every stage reads its inputs from and writes its artifacts to the output
//! directory, and records their hashes in `manifest.json`. `pipeline` skips
//! stages whose recorded inputs and outputs are unchanged.

pub mod config;
pub mod error;
pub mod fixture;
pub mod io;
pub mod manifest;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Loaded, Overrides, PipelineConfig};
pub use error::{CliError, Result};
pub use stages::Stage;

#[derive(Debug, Parser)]
#[command(name = "cimq", version, about = "Strip-wise mixed-precision quantization for ReRAM crossbars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score strip sensitivity.
    Score(Common),
    /// Search the precision threshold.
    Optimize(Common),
    /// Quantize every configured run.
    Compress(Common),
    /// Map strips onto crossbar tiles.
    Place(Common),
    /// Run inference on the crossbars and cost it.
    Simulate(Common),
    /// Summarize all runs.
    Report(Common),
    /// Run all stages, skipping those already up to date.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Stop after this stage.
        #[arg(long, value_enum)]
        stage: Option<Stage>,
        /// Re-run stages even when up to date.
        #[arg(long)]
        force: bool,
    },
    /// Write the bundled toy model, data and config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Route every prediction through a single dominant strip.
        #[arg(long)]
        rigged: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the calibration and Hutchinson seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hardware parameter as key=value; repeatable.
    #[arg(long = "hw-override", value_name = "KEY=VALUE")]
    pub hw_override: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            hw: self.hw_override.clone(),
        }
    }
}

/// Loads `config` and runs stages up to `through` (all when `None`).
pub fn run_pipeline(config: &Path, overrides: &Overrides, through: Option<Stage>, force: bool) -> Result<Vec<Stage>> {
    let loaded = config::load(config, overrides)?;
    let stages = through.unwrap_or(Stage::Report).through();
    stages::run_stages(&loaded, &stages, force)
}

/// Loads `config` and runs exactly one stage.
pub fn run_stage(config: &Path, overrides: &Overrides, stage: Stage) -> Result<Vec<Stage>> {
    let loaded = config::load(config, overrides)?;
    stages::run_stages(&loaded, &[stage], true)
}

pub fn run(cli: Cli) -> Result<()> {
    let single = |c: &Common, s: Stage| run_stage(&c.config, &c.overrides(), s).map(drop);
    match &cli.command {
        Command::Score(c) => single(c, Stage::Score),
        Command::Optimize(c) => single(c, Stage::Optimize),
        Command::Compress(c) => single(c, Stage::Compress),
        Command::Place(c) => single(c, Stage::Place),
        Command::Simulate(c) => single(c, Stage::Simulate),
        Command::Report(c) => single(c, Stage::Report),
        Command::Pipeline { common, stage, force } => {
            run_pipeline(&common.config, &common.overrides(), *stage, *force).map(drop)
        }
        Command::Fixture { out, seed, rigged } => {
            let path = fixture::write_fixture(out, *seed, *rigged)?;
            println!("fixture: wrote {}", path.display());
            Ok(())
        }
    }
}

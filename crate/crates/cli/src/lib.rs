//! Command-line front end: `gen-data`, `pretrain`, `adapt`, `sweep`, `report`.

pub mod commands;
pub mod config;

use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

use actta::activation::Granularity;
use actta::shiftgen::CorruptionKind;
use config::{ExperimentConfig, ScheduleKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "actta", version, about = "Test-time adaptation with reparameterized activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptFlags {
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub corruption: Option<CorruptionKind>,
    #[arg(long)]
    pub severity: Option<u8>,
    /// affine, actta, actta_star, custom=g1,g2,... or none.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub depth_ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test split.
    GenData(Common),
    /// Train the source model on the clean split.
    Pretrain(Common),
    /// Adapt the pretrained model on a shifted stream.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AdaptFlags,
    },
    /// Run a factorial grid of adaptation settings.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AdaptFlags,
        /// TOML file with the grid axes; otherwise the config's `[sweep]` table.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs into markdown tables.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Also write report.md into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, flags: Option<&AdaptFlags>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(f) = flags {
        let a = &mut cfg.adapt;
        if let Some(v) = f.schedule {
            a.schedule = v;
        }
        if let Some(v) = f.corruption {
            a.corruption = v;
        }
        if let Some(v) = f.severity {
            a.severity = v;
        }
        if let Some(v) = &f.groups {
            a.groups = v.clone();
        }
        if let Some(v) = f.lr {
            a.base_lr = v;
        }
        if let Some(v) = f.batch_size {
            a.batch_size = v;
        }
        if let Some(v) = f.granularity {
            cfg.model.granularity = v;
        }
        if let Some(v) = f.depth_ratio {
            cfg.model.depth_ratio = v;
        }
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::GenData(c) => commands::gen_data(&resolve(c, None)?),
        Command::Pretrain(c) => commands::pretrain_cmd(&resolve(c, None)?),
        Command::Adapt { common, flags } => commands::adapt_cmd(&resolve(common, Some(flags))?),
        Command::Sweep { common, flags, grid } => commands::sweep_cmd(&resolve(common, Some(flags))?, grid.as_deref()),
        Command::Report { csv, out } => commands::report_cmd(csv, out.as_deref()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaloss::loss::LossVariant;

use crate::commands::{self, OnlineMode, DATA_FILE};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "metaloss", version, about = "Meta-learned losses for inverse dynamics")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Overrides --preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in config: sim or hardware.
    #[arg(long, global = true, default_value = "sim")]
    pub preset: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to the config's out_dir.
    #[arg(long, global = true, env = "METALOSS_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    All,
    Mlp,
    Structured,
    StateDependent,
}

impl VariantArg {
    fn resolve(self, cfg: &ExperimentConfig) -> Vec<LossVariant> {
        match self {
            Self::All => cfg.variants.clone(),
            Self::Mlp => vec![LossVariant::Mlp],
            Self::Structured => vec![LossVariant::Structured],
            Self::StateDependent => vec![LossVariant::StateDependent],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved config as JSON.
    InitConfig,
    /// Simulate the sine-motion dataset.
    GenData,
    /// Meta-train learned losses.
    MetaTrain {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        /// Dataset CSV (default: <out>/data.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train fresh models with MSE and each learned loss.
    Eval {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding phi_<variant>.json (default: <out>).
        #[arg(long)]
        phi_dir: Option<PathBuf>,
    },
    /// Online adaptation: segmented payload task or streaming test runs.
    Online {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        phi_dir: Option<PathBuf>,
        /// Stream over the test-split runs instead of the segmented task.
        #[arg(long, conflicts_with = "segmented")]
        stream: bool,
        /// Segmented payload task (the default).
        #[arg(long)]
        segmented: bool,
    },
    /// φ exports and a summary of existing artifacts.
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&g.preset)?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let data_or = |d: Option<PathBuf>| d.unwrap_or_else(|| out.join(DATA_FILE));
    let written = match cli.command {
        Command::InitConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(());
        }
        Command::GenData => commands::gen_data(&cfg, &out)?,
        Command::MetaTrain { variant, data } => commands::meta_train(&cfg, &data_or(data), &out, &variant.resolve(&cfg))?,
        Command::Eval { variant, data, phi_dir } => {
            let phi = phi_dir.unwrap_or_else(|| out.clone());
            commands::eval(&cfg, &data_or(data), &phi, &out, &variant.resolve(&cfg))?
        }
        Command::Online {
            variant,
            data,
            phi_dir,
            stream,
            segmented: _,
        } => {
            let phi = phi_dir.unwrap_or_else(|| out.clone());
            let mode = if stream { OnlineMode::Stream } else { OnlineMode::Segmented };
            commands::online(&cfg, &data_or(data), &phi, &out, &variant.resolve(&cfg), mode)?
        }
        Command::Report { data } => commands::report(&cfg, &data_or(data), &out)?,
    };
    if written.is_empty() {
        return Err(CliError::Missing("command produced no outputs".into()));
    }
    for w in written {
        println!("{}", out.join(w).display());
    }
    Ok(())
}

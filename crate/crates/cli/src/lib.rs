//! Command-line driver: parses the experiment file, runs the requested stage
//! and writes its artifacts.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "icpo",
    version,
    about = "In-context policy optimization laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the dataset seed and the experiment seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Worker threads for the parallel loops.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a pretraining dataset into `<out>/dataset`.
    Generate(CommonArgs),
    /// Fit student parameters on a dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory; defaults to `<out>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the configured experiment.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained parameter file; generated and trained into `<out>` when absent.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run the minimum-entropy loop over a question file.
    MeIcpo(CommonArgs),
}

fn prepare(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.override_seed(seed);
    }
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        cfg.threads = Some(t);
    }
    if let Some(t) = cfg.threads {
        icpo_core::exec::configure_threads(t);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            CliError::Usage("no output directory: pass --out or set output_dir".into())
        })?;
    Ok((cfg, out))
}

/// Runs one subcommand and returns the lines to print.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, out) = prepare(&args)?;
            let manifest = commands::cmd_generate(&cfg, &out)?;
            Ok(vec![format!(
                "wrote {} trajectories ({} pairs) to {}",
                manifest.trajectories,
                manifest.pairs,
                out.join(commands::DATASET_DIR).display()
            )])
        }
        Command::Train { common, dataset } => {
            let (cfg, out) = prepare(&common)?;
            let dataset = dataset.unwrap_or_else(|| out.join(commands::DATASET_DIR));
            let s = commands::cmd_train(&cfg, &dataset, &out)?;
            Ok(vec![format!(
                "trained with {:?}: loss {:.6e}, gradient norm {:.3e}, written to {}",
                s.solver,
                s.final_loss,
                s.final_grad_norm,
                out.join(commands::PARAMS_FILE).display()
            )])
        }
        Command::Experiment { common, params } => {
            let (cfg, out) = prepare(&common)?;
            let written = commands::cmd_experiment(&cfg, params.as_deref(), &out)?;
            Ok(written
                .iter()
                .map(|p| format!("wrote {}", p.display()))
                .collect())
        }
        Command::MeIcpo(args) => {
            let (cfg, out) = prepare(&args)?;
            let m = commands::cmd_me_icpo(&cfg, &out)?;
            Ok(vec![format!(
                "Mean@k {:.4} Accuracy {:.4} Maj@k {:.4} ({} calls), written to {}",
                m.mean_at_k,
                m.accuracy,
                m.maj_at_k,
                m.accounting.calls,
                out.display()
            )])
        }
    }
}

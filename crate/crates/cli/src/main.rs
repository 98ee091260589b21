mod commands;
mod config;
mod data;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use failure::Failure;

/// Number of folds or sweep points trained concurrently.
pub const WORKERS_ENV: &str = "GATENET_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "gatenet", version, about = "Train and evaluate GateNet cell-population classifiers")]
struct Cli {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, fold splits, context draws and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "gatenet-out")]
    out: PathBuf,
    /// Configuration override, e.g. `--set train.max_lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Train one model on every sample of a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Label samples with a trained model and emit plot data.
    Predict {
        #[arg(long, required_unless_present = "hierarchy")]
        checkpoint: Option<PathBuf>,
        /// Directory with one `<stage>.ckpt` per gating stage (and optionally
        /// `hierarchy.toml`); parents predicted at one stage feed the next.
        #[arg(long, conflicts_with = "checkpoint")]
        hierarchy: Option<PathBuf>,
        #[arg(required = true)]
        samples: Vec<PathBuf>,
    },
    /// k-fold cross-validation.
    Cv {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cross-validation with subsampled training folds.
    LearningCurve {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated sizes, `all` for the full fold.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<String>,
    },
    /// Leave-one-expert-out agreement over dataset directories gated by different experts.
    ExpertEval {
        #[arg(long, num_args = 1.., required = true)]
        experts: Vec<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
    },
    /// Cross-validation over a list of values for one parameter.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// gamma, beta_loss, beta_sampling, max_lr or k.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Inference throughput on a synthetic sample.
    Bench,
    /// Re-run the command recorded in a manifest, after checking its inputs.
    Replay { manifest: PathBuf },
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut table = match &cli.config {
        Some(path) => config::read_table(path)?,
        None => toml::Table::new(),
    };
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        let w: usize = w
            .parse()
            .map_err(|_| Failure::config(format!("{WORKERS_ENV}=`{w}` is not a worker count")))?;
        config::apply_override(&mut table, &format!("eval.workers={w}"))?;
    }
    if let Some(seed) = cli.seed {
        for key in ["train.seed", "eval.split_seed", "predict.seed", "synth.seed"] {
            config::apply_override(&mut table, &format!("{key}={seed}"))?;
        }
    }
    for o in &cli.overrides {
        config::apply_override(&mut table, o)?;
    }
    let mut cfg = config::from_table(table)?;
    commands::fold_flags(&cli.command, &mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Replay { manifest } = &cli.command {
        let m = output::read_manifest(manifest)?;
        output::verify_inputs(&m)?;
        return commands::execute(&m.command, &m.config, &cli.out);
    }
    let cfg = resolve(&cli)?;
    commands::execute(&cli.command, &cfg, &cli.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

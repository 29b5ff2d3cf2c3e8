mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tcnl_core::data::DataError;
use tcnl_core::metrics::MetricsError;
use tcnl_core::net::NetError;
use tcnl_core::train::TrainError;

use commands::{GradcheckArgs, UsageError, VerificationFailed};
use config::{ConfigError, RunConfig};

/// Concept-branch CNN toolkit: synthetic data, training, evaluation and self-checks.
///
/// Exit codes: 0 success, 1 failed verification, 2 configuration or usage
/// error, 3 numerical failure, 4 I/O error.
#[derive(Parser)]
#[command(name = "tcnl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic concept dataset to a directory.
    GenData {
        /// JSON run config; only the `dataset` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes best.ckpt, final.ckpt and history.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the ablation twin: concept losses no longer reach the extractors.
        #[arg(long)]
        no_concept_constraint: bool,
        /// Override `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints a table and writes a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON run config; only the `metrics` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; defaults to the checkpoint path with a `.report.json` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write instance/visualisation pairs and a positional montage for one test sample.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a constrained model and its ablation twin, then compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference and routing self-checks; exits 1 on any failure.
    Gradcheck {
        /// Random instances per primitive.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Small networks used to check the composed objective.
        #[arg(long, default_value_t = 20)]
        composed_seeds: usize,
        /// Geometries for the conv adjoint identity.
        #[arg(long, default_value_t = 100)]
        adjoint_configs: usize,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Test hook: corrupt the backward rule of this op.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, force } => {
            let config = RunConfig::load(config.as_deref())?;
            commands::gen_data(&config, &out, seed, force)
        }
        Command::Train {
            config,
            data,
            out,
            no_concept_constraint,
            seed,
        } => {
            let mut config = RunConfig::load(config.as_deref())?;
            config.train.disable_concept_constraint |= no_concept_constraint;
            if let Some(s) = seed {
                config.train.seed = s;
            }
            commands::train_cmd(&config, &data, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => {
            let config = RunConfig::load(config.as_deref())?;
            commands::eval_cmd(&config, &checkpoint, &data, out.as_deref())
        }
        Command::Visualize {
            checkpoint,
            data,
            index,
            out,
        } => commands::visualize_cmd(&checkpoint, &data, index, &out),
        Command::Ablate { config, data, out } => {
            let config = RunConfig::load(config.as_deref())?;
            commands::ablate_cmd(&config, &data, &out)
        }
        Command::Gradcheck {
            seeds,
            composed_seeds,
            adjoint_configs,
            json,
            corrupt_op,
        } => commands::gradcheck_cmd(&GradcheckArgs {
            seeds,
            composed_seeds,
            adjoint_configs,
            json: json.as_deref(),
            corrupt_op: corrupt_op.as_deref(),
        }),
    }
}

const USAGE: u8 = 2;
const NUMERIC: u8 = 3;
const IO: u8 = 4;

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Config(_) | DataError::Shape(_) | DataError::Version { .. } => USAGE,
        DataError::Io { .. } | DataError::MissingConceptFile { .. } | DataError::MissingFile { .. } | DataError::Format { .. } => IO,
    }
}

fn net_code(e: &NetError) -> u8 {
    match e {
        NetError::Spec(_) | NetError::Input(_) | NetError::Version { .. } => USAGE,
        NetError::Tensor(_) => NUMERIC,
        NetError::Checkpoint(_) | NetError::BadMagic(_) | NetError::Truncated(_) | NetError::Io { .. } => IO,
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::Empty(_) | MetricsError::Shape(_) => USAGE,
        MetricsError::Net(n) => net_code(n),
        MetricsError::Tensor(_) => NUMERIC,
        MetricsError::Data(d) => data_code(d),
    }
}

/// Map the first recognised error in the chain to the exit-code contract.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 1;
        }
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFinite { .. } | TrainError::Tensor(_) => NUMERIC,
                TrainError::Config(_) | TrainError::Mismatch(_) => USAGE,
                TrainError::Net(n) => net_code(n),
                TrainError::Metrics(m) => metrics_code(m),
            };
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return net_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return metrics_code(e);
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    USAGE
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

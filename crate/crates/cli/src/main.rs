use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Exit status classes.
#[derive(Debug)]
pub enum CliError {
    /// A check or criterion failed (exit 1).
    Check(String),
    /// Bad flags, configs, checkpoints or shapes (exit 2).
    Invalid(String),
    /// Non-finite values during a run (exit 3).
    Abort(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Abort(_) => 3,
        }
    }
}

impl From<knn_attn::Error> for CliError {
    fn from(e: knn_attn::Error) -> Self {
        use knn_attn::Error as E;
        match e {
            E::NumericalAbort { .. } | E::NonFinite { .. } | E::EmptyAttentionRow { .. } => CliError::Abort(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "knn-attn", version, about = "k-NN attention kernels, lemma experiments and a toy ViT trainer")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "KNN_ATTN_OUT", default_value = "knn-attn-out")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 selects the deterministic sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Kernel, mask, gradient and metric invariant suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces every numeric tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Monte-Carlo lemma experiment.
    Lemma {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        which: u8,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trains the toy ViT on the synthetic task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Paired runs from one initialisation, e.g. `dense,knn`.
        #[arg(long, value_delimiter = ',')]
        compare: Option<Vec<String>>,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Diagnostics report from one forward pass.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        /// Image index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Median wall time of the dense, fast and slow kernels.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, msg) = match &e {
                CliError::Check(m) => ("check failed", m),
                CliError::Invalid(m) => ("invalid input", m),
                CliError::Abort(m) => ("numerical abort", m),
            };
            eprintln!("knn-attn: {kind}: {msg}");
            ExitCode::from(e.code())
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "tltc",
    version,
    about = "Train, compress and analyse tiny Transformer language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every experiment that reads a config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Key-value experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subset of the model grid to run, e.g. `L2-H64,L4-H128`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Metric {
    Accuracy,
    Perplexity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Memory {
    Bits,
    Nonzero,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain every grid model with masked-LM; writes `<label>.csv` curves
    /// and `<label>.ckpt` checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetune a checkpoint on the downstream task and evaluate every
    /// quantization width and sparsity in the compression grid.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write a checkpoint for every compressed model.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Compression error statistics between checkpoints, and steps/FLOPs/
    /// seconds to a target loss over learning curves.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        /// Uncompressed reference checkpoint.
        #[arg(long, requires = "compressed")]
        original: Option<PathBuf>,
        #[arg(long, num_args = 1.., requires = "original")]
        compressed: Vec<PathBuf>,
        /// Learning-curve CSVs to aggregate.
        #[arg(long, num_args = 1.., requires = "target_loss")]
        curves: Vec<PathBuf>,
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Pareto frontier CSV and SVG plots from compression points and
    /// learning curves.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1..)]
        points: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "accuracy")]
        metric: Metric,
        #[arg(long, value_enum, default_value = "bits")]
        memory: Memory,
    },
    /// Train the first grid model at several batch sizes and compare the
    /// steps and time to a target loss.
    SweepBatch {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        batches: Vec<usize>,
        /// Defaults to the worst final loss across runs.
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Train every grid model on growing fractions of the corpus.
    SweepData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1.0")]
        fractions: Vec<f64>,
    },
    /// Snapshot the first grid model during pretraining, then finetune and
    /// quantize every snapshot.
    ConvergenceStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        fractions: Vec<f64>,
    },
    /// Train every grid model under each parameter-sharing mode.
    ShareStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "none,all_layers,attention_only")]
        modes: Vec<String>,
    },
    /// Write a synthetic English-like text corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

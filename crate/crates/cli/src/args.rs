use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "binarymos", version, about = "1-bit LLM binarization laboratory")]
pub struct Cli {
    /// Seed for every randomized step (default 0, or the run config's seed
    /// for `distill`). Identical seeds give identical output.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deployment size and compression ratio per model and method.
    Footprint(FootprintArgs),
    /// Convert a full-precision checkpoint to a binarized one, untrained.
    Binarize(BinarizeArgs),
    /// Distill a full-precision teacher into a binarized student.
    Distill(DistillArgs),
    /// Perplexity of a checkpoint on text files.
    Eval(EvalArgs),
    /// Latency of the binary GEMV kernels.
    Bench(BenchArgs),
    /// Per-token gating scores and scale statistics of one projection.
    RouterAnalyze(RouterArgs),
    /// Dump checkpoint tensors as JSON.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct FootprintArgs {
    /// Footprint spec (TOML); defaults to the bundled LLaMA-7B and 13B table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for footprint.csv and footprint.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the CSV here; `-` for standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BinarizeArgs {
    /// Full-precision checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// float, static, dual, partial, residual or mos.
    #[arg(long)]
    pub scheme: String,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    /// Salient fraction for the partial and residual schemes.
    #[arg(long, default_value_t = 0.1)]
    pub salient_ratio: f64,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Run config (TOML) with [model], [distill], [teacher] and [data].
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, metrics and validation text.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-train the teacher first instead of loading one.
    #[arg(long)]
    pub train_teacher: bool,
    /// Teacher checkpoint; overrides `teacher.path` in the config.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Override the student's expert count.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Override the student's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the student's layer scheme.
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text files; likelihoods are pooled across files.
    #[arg(long, required = true, num_args = 1..)]
    pub text: Vec<PathBuf>,
    /// Window length; defaults to the model's context length.
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run every kernel at the six reference layer shapes.
    #[arg(long)]
    pub paper_shapes: bool,
    /// Layer shape as NxM (output x input); repeatable.
    #[arg(long = "shape")]
    pub shapes: Vec<String>,
    /// Comma-separated kernels: dense, onebit, binarymos, pbllm, billm.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    /// Timed repetitions per kernel (at least 30).
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// Untimed repetitions before timing (at least 5).
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RouterArgs {
    /// Checkpoint of a mos-scheme model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    /// Projection as `blocks.<l>.<q|k|v|o|gate|up|down>` or block-major index.
    #[arg(long, default_value = "blocks.0.q")]
    pub layer: String,
    /// Per-token gate CSV; the statistics go next to it as `<stem>.stats.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Channels of each scale vector summarized.
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Only this tensor.
    #[arg(long)]
    pub tensor: Option<String>,
    /// JSON destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lightcrl::data::{SplitTag, DEFAULT_CLASS_SPREAD};
use lightcrl::FusionKind;

#[derive(Debug, Parser)]
#[command(name = "lightcrl", version, about = "Cross-modal alignment with a shared fusion encoder")]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file supplying defaults for any long flag; flags on the
    /// command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic paired-embedding file.
    Gensynth(GensynthArgs),
    /// Train the fusion encoder on a paired-embedding file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one protocol.
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a checkpoint file.
    Inspect(InspectArgs),
    /// Convert between JSONL and binary embedding files.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fusion {
    Add,
    Multiply,
    Concat,
    Attention,
}

impl From<Fusion> for FusionKind {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Add => FusionKind::Add,
            Fusion::Multiply => FusionKind::Multiply,
            Fusion::Concat => FusionKind::Concat,
            Fusion::Attention => FusionKind::Attention,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl From<Split> for SplitTag {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitTag::Train,
            Split::Val => SplitTag::Val,
            Split::Test => SplitTag::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Zeroshot,
    Recall,
    Probe,
    Finetune,
}

fn precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got {s}")),
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Floating-point width used for computation.
    #[arg(long, value_parser = precision)]
    pub precision: Option<u32>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GensynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_parser = positive)]
    pub n: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub d_latent: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub d1: usize,
    #[arg(long, default_value_t = 48, value_parser = positive)]
    pub d2: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub classes: usize,
    /// Standard deviation of the class means in latent space.
    #[arg(long, default_value_t = DEFAULT_CLASS_SPREAD)]
    pub class_spread: f64,
    /// Which sample stream of the seeded world to draw from.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Output file; defaults to `<out-dir>/synth_<split>.lce`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "val_fraction")]
    pub val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, value_enum, default_value_t = Fusion::Add)]
    pub fusion: Fusion,
    #[arg(long, default_value_t = 64)]
    pub batch_k: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub d_model: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub d_ctx: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub d_out: usize,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Continue from a `last.lck` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled pairs to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// Class prototypes (modality 2, one row per class) for zero-shot.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Training pairs for the probe or fine-tune head.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub topk: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20, value_parser = positive)]
    pub eval_every: usize,
    /// Head learning rate for probe and fine-tune.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, value_parser = precision)]
    pub precision: Option<u32>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = precision, default_value_t = 64)]
    pub precision: u32,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub d_model: usize,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub d1: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub d2: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub d_ctx: usize,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub d_out: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub batch_k: usize,
    /// Fusion kinds to check; defaults to add and attention.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub fusion: Vec<Fusion>,
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Print the summary as one JSON object.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// `.jsonl` converts to binary; anything else is read as binary and
    /// written as JSONL.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Split tag recorded when converting from JSONL.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
}

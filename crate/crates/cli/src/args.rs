use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "sparsed",
    version,
    about = "Block-sparse attention with captured, reused patterns for iterative masked denoisers"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores). Outputs other than timings do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Denoise one sequence and write tokens, step trace, masks and manifest.
    Generate(GenerateArgs),
    /// Per-step latency and FLOPs across sequence lengths and modes.
    Bench(BenchArgs),
    /// Sweep skip or rho and compare every run against dense.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeName {
    Dense,
    Sparsed,
    AlwaysSparse,
    Recompute,
    Joint,
    Window,
    Streaming,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Dense => "dense",
            ModeName::Sparsed => "sparsed",
            ModeName::AlwaysSparse => "always-sparse",
            ModeName::Recompute => "recompute",
            ModeName::Joint => "joint",
            ModeName::Window => "window",
            ModeName::Streaming => "streaming",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Skip,
    Rho,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Skip => "skip",
            SweepParam::Rho => "rho",
        }
    }
}

/// Capture and schedule parameters shared by every command.
#[derive(Args, Debug, Clone)]
pub struct SparseArgs {
    /// Fraction of key blocks kept per region.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Fraction of denoising steps run densely before the capture step.
    #[arg(long, default_value_t = 0.2)]
    pub skip: f64,
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    /// Denoising steps.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model seed and synthetic prompt seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// key=value toy model description (n_layers, n_heads, head_dim, vocab_size, max_len).
    /// Its seed is replaced by --seed.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BaselineArgs {
    /// Sliding-window width in tokens (window and streaming modes).
    #[arg(long)]
    pub window: Option<usize>,
    /// Fraction of leading tokens kept as sinks (streaming mode).
    #[arg(long)]
    pub sink: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SequenceArgs {
    /// Total sequence length, prompt plus generated tokens.
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    /// Prompt length (default: half of --seq-len, or the prompt file's length).
    #[arg(long)]
    pub prefill_len: Option<usize>,
    /// Whitespace-separated token ids to use as the prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = ModeName::Sparsed)]
    pub mode: ModeName,
    #[command(flatten)]
    pub sparse: SparseArgs,
    #[command(flatten)]
    pub sequence: SequenceArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    /// Write per-step attention heatmaps and cross-step similarity.
    #[arg(long)]
    pub dump_attn: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Sequence lengths; each run uses a prompt of half the length.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seq_lens: Vec<usize>,
    /// Modes to time; dense is always included as the reference.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "dense,sparsed"
    )]
    pub modes: Vec<ModeName>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub sparse: SparseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub sweep: SweepParam,
    /// Values taken by the swept parameter.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub sparse: SparseArgs,
    #[command(flatten)]
    pub sequence: SequenceArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// manifest.txt written by an earlier run.
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// The flag groups a command shares with the others.
#[derive(Clone, Copy)]
pub struct BaseArgsView<'a> {
    pub sparse: &'a SparseArgs,
    pub model: &'a ModelArgs,
    pub sequence: Option<&'a SequenceArgs>,
    pub baseline: Option<&'a BaselineArgs>,
}

impl GenerateArgs {
    pub fn view(&self) -> BaseArgsView<'_> {
        BaseArgsView {
            sparse: &self.sparse,
            model: &self.model,
            sequence: Some(&self.sequence),
            baseline: Some(&self.baseline),
        }
    }
}

impl BenchArgs {
    pub fn view(&self) -> BaseArgsView<'_> {
        BaseArgsView {
            sparse: &self.sparse,
            model: &self.model,
            sequence: None,
            baseline: Some(&self.baseline),
        }
    }
}

impl AblateArgs {
    pub fn view(&self) -> BaseArgsView<'_> {
        BaseArgsView {
            sparse: &self.sparse,
            model: &self.model,
            sequence: Some(&self.sequence),
            baseline: None,
        }
    }
}

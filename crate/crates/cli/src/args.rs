use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "lowbit", version, about = "Low-bit post-training quantization of small decoder models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a small full-precision decoder and write its checkpoint.
    TrainToy(TrainArgs),
    /// Quantize a full-precision checkpoint block by block.
    Quantize(QuantizeArgs),
    /// Perplexity and weight memory of a checkpoint.
    EvalPpl(EvalArgs),
    /// Per-layer codes that differ from round-to-nearest on the same checkpoint.
    InspectFlips(FlipArgs),
    /// Sweep hardening schedules and write final perplexities as CSV.
    AblateSchedule(AblateArgs),
    /// Re-run the command recorded in a container or report.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// Raw bytes, vocabulary 256.
    Text,
    /// Little-endian u16 token ids.
    Tokens,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Corpus file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = DataFormat::Text)]
    pub data_format: DataFormat,
    /// Segments to skip at the start of the corpus.
    #[arg(long, default_value_t = 0)]
    pub skip: usize,
    /// Segments to use after the skipped ones (all remaining when absent).
    #[arg(long)]
    pub take: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Corpus file; omit with --synthetic.
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataFormat::Text)]
    pub data_format: DataFormat,
    /// Train on a generated patterned corpus instead of a file.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    /// Words in the synthetic lexicon.
    #[arg(long, default_value_t = 48)]
    pub synthetic_words: usize,
    /// Tokens in the synthetic corpus.
    #[arg(long, default_value_t = 38400)]
    pub synthetic_tokens: usize,
    /// Write the training corpus as a u16 token file.
    #[arg(long)]
    pub save_corpus: Option<PathBuf>,
    /// Vocabulary size; text corpora require 256.
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 172)]
    pub mlp_hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    /// Rotary position embeddings instead of learned absolute positions.
    #[arg(long)]
    pub rope: bool,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Par,
    Rtn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardenOrderArg {
    /// Most decided variables first.
    Highest,
    /// Least decided variables first.
    Lowest,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct QuantArgs {
    /// Weight bit-width (2-8).
    #[arg(long, default_value_t = 2)]
    pub bits: u8,
    /// Group size along the input axis; 0 means one group per output channel.
    #[arg(long, default_value_t = 0)]
    pub group_size: usize,
    /// Max-side clipping multiplier in (0, 1].
    #[arg(long, default_value_t = 1.0, conflicts_with = "search_clip")]
    pub gamma: f32,
    /// Min-side clipping multiplier in (0, 1].
    #[arg(long, default_value_t = 1.0, conflicts_with = "search_clip")]
    pub beta: f32,
    /// Per-group clipping grid search with this many steps.
    #[arg(long)]
    pub search_clip: Option<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Par)]
    pub method: MethodArg,
    /// `exp:t=<temperature>,K=<iterations>` or `list:<p1>,<p2>,...`.
    #[arg(long, default_value = "exp:t=4,K=20")]
    pub schedule: String,
    #[arg(long, value_enum, default_value_t = HardenOrderArg::Highest)]
    pub harden_order: HardenOrderArg,
    /// Adam steps per hardening iteration.
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Disable the learned per-group dequantization scale.
    #[arg(long)]
    pub no_dst: bool,
    /// Keep the learned rounding even when it ends worse than round-to-nearest.
    #[arg(long)]
    #[serde(default)]
    pub no_rtn_fallback: bool,
    /// Also fake-quantize activations during reconstruction (needs --act-bits).
    #[arg(long, requires = "act_bits")]
    pub quant_acts: bool,
    /// Per-token activation bit-width for evaluation (and reconstruction with --quant-acts).
    #[arg(long)]
    pub act_bits: Option<u8>,
    /// Collect block inputs through full-precision predecessors.
    #[arg(long)]
    pub fp_propagation: bool,
    #[arg(long, default_value_t = 10)]
    pub log_interval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct QuantizeArgs {
    /// Full-precision checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub calib: DataArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Quantized container to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-block JSON-lines report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for per-block loss-trace CSVs.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint (full-precision or quantized).
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Per-token activation fake-quant bit-width.
    #[arg(long)]
    pub act_bits: Option<u8>,
    /// Write the result as JSON here as well.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FlipArgs {
    /// Full-precision checkpoint the quantized one was produced from.
    #[arg(long)]
    pub model: PathBuf,
    /// Quantized container.
    #[arg(long)]
    pub quantized: PathBuf,
    /// Write the table as CSV here as well.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub calib: DataArgs,
    /// Held-out corpus for perplexity.
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub eval_skip: usize,
    #[arg(long)]
    pub eval_take: Option<usize>,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Temperatures of the exponential schedules.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    pub temperatures: Vec<f64>,
    /// Iterations of the exponential schedules.
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    /// Extra handcrafted schedules, each `list:p1,p2,...`; repeatable.
    #[arg(long = "list")]
    pub lists: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Container or JSON-lines report carrying a `run` record.
    pub artifact: PathBuf,
}

//! Command-line argument definitions.
//!
//! Every value knob is optional at the clap level; actual values resolve as
//! CLI flag > config file > built-in default (see `resolve.rs`).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ngm",
    version,
    about = "Training-free n-gram memory over a frozen toy decoder",
    long_about = None
)]
pub struct Cli {
    /// JSON config file ({ngm, decoder, sampler, paths, seeds}); command
    /// line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a decoder from a seed and save it as a checkpoint.
    Init(InitArgs),
    /// Encode token ids into causal multi-scale n-gram vectors.
    Encode(EncodeArgs),
    /// Generate tokens, optionally with the memory module enabled.
    Generate(GenerateArgs),
    /// Mechanistic analysis reports.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Latency / op-count benchmarks.
    Bench {
        #[command(subcommand)]
        what: BenchCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Per-layer alignment vs. shuffled and random controls.
    Align(AnalyzeAlignArgs),
    /// Cross-position cosine matrix at one layer.
    Locality(AnalyzeLocalityArgs),
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Prefill latency over prompt lengths.
    Prefill(BenchArgs),
    /// Per-token decode latency after prefill.
    Decode(BenchArgs),
}

/// Decoder source: a checkpoint directory or (seeded) init parameters.
#[derive(Debug, Args, Clone, Default)]
pub struct DecoderArgs {
    /// Load the decoder from a checkpoint directory instead of seeding one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long)]
    pub decoder_seed: Option<u64>,
    /// Tie the output projection to the embedding table (true/false).
    #[arg(long)]
    pub tied: Option<bool>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct NgmArgs {
    /// Toggle the memory module (on/off); it is on by default wherever a
    /// subcommand uses it.
    #[arg(long, value_parser = ["on", "off"])]
    pub ngm: Option<String>,
    /// Comma-separated window sizes, strictly increasing (e.g. 2,3).
    /// Duplicates are rejected, not deduplicated.
    #[arg(long)]
    pub ngram_sizes: Option<String>,
    /// Output scale applied to every injected update.
    #[arg(long)]
    pub scale: Option<f32>,
    /// Clip negative gate scores to zero.
    #[arg(long, overrides_with = "no_relu")]
    pub relu: bool,
    /// Keep raw cosine gates, including negative ones.
    #[arg(long, overrides_with = "relu")]
    pub no_relu: bool,
    /// Fusion mode: stack or concat.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Comma-separated 0-based injection layer ids (e.g. 1,14).
    #[arg(long)]
    pub layers: Option<String>,
    /// Vocab file for the compressed-token pre-pass
    /// (`id<TAB>surface` lines, optional `#marker=<char>` header).
    #[arg(long)]
    pub comptok: Option<PathBuf>,
    /// Position mask file: whitespace-separated 0/1 per position; zeros are
    /// excluded from n-gram pooling.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Feature construction during decode: streaming or recompute.
    #[arg(long)]
    pub ngm_mode: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SamplerArgs {
    /// greedy or sample.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Sampler RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub decoder: DecoderArgs,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the embedding table on its own as NGME.
    #[arg(long)]
    pub export_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Embedding table: binary NGME or whitespace text rows.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Inline ids, whitespace separated (e.g. "5 9 2").
    #[arg(long)]
    pub ids: Option<String>,
    /// File of whitespace-separated ids.
    #[arg(long)]
    pub ids_file: Option<PathBuf>,
    #[arg(long)]
    pub ngram_sizes: Option<String>,
    #[arg(long)]
    pub comptok: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Binary stack dump destination; without it a text summary is printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[command(flatten)]
    pub ngm: NgmArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Inline prompt ids, whitespace separated.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// JSON trace (resolved config + prompt + generated ids).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeAlignArgs {
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[command(flatten)]
    pub ngm: NgmArgs,
    /// Corpus file, one whitespace-separated id sequence per line; omitted
    /// means a synthetic corpus is generated.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub control_seed: Option<u64>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long)]
    pub synth_sequences: Option<usize>,
    #[arg(long)]
    pub synth_len: Option<usize>,
    /// JSON report destination; stdout summary otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeLocalityArgs {
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[command(flatten)]
    pub ngm: NgmArgs,
    /// Inline sample ids; omitted means a synthetic sample is generated.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long)]
    pub sample_file: Option<PathBuf>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long)]
    pub synth_len: Option<usize>,
    /// 0-based layer to probe.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Long-format matrix CSV (i,j,value).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[command(flatten)]
    pub ngm: NgmArgs,
    /// Comma-separated prompt lengths.
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub decode_tokens: Option<usize>,
    /// Comma-separated modes out of off,recompute,streaming.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub prompt_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

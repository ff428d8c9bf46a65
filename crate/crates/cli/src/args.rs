use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "coreinfer", version, about = "CPU inference with frozen sentence-level FFN neuron sparsity")]
pub struct Cli {
    /// Cap on kernel worker threads; overrides COREINFER_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", content = "args")]
pub enum Command {
    /// Generate from a prompt and write a generation report.
    Run(RunArgs),
    /// Dump per-sequence frequency maps, core sets and stability curves.
    Analyze(AnalyzeArgs),
    /// Build a semantic group store from a corpus.
    Cluster(ClusterArgs),
    /// Perplexity, parameter sweeps and core-vs-semantic correlation.
    Eval(EvalArgs),
    /// Time dense and sparse decoding.
    Bench(BenchArgs),
    /// Write a seeded random-weight model bundle and optional corpora.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run(_) => "run",
            Command::Analyze(_) => "analyze",
            Command::Cluster(_) => "cluster",
            Command::Eval(e) => match e.kind {
                EvalKind::Ppl(_) => "eval ppl",
                EvalKind::Sweep(_) => "eval sweep",
                EvalKind::Spearman(_) => "eval spearman",
            },
            Command::Bench(_) => "bench",
            Command::Synth(_) => "synth",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_mut(&mut self) -> Option<&mut PathBuf> {
        Some(match self {
            Command::Run(a) => &mut a.out,
            Command::Analyze(a) => &mut a.out,
            Command::Cluster(a) => &mut a.out,
            Command::Eval(e) => match &mut e.kind {
                EvalKind::Ppl(a) => &mut a.common.out,
                EvalKind::Sweep(a) => &mut a.common.out,
                EvalKind::Spearman(a) => &mut a.common.out,
            },
            Command::Bench(a) => &mut a.out,
            Command::Synth(a) => &mut a.out,
            Command::Replay(_) => return None,
        })
    }
}

/// Generation settings. Each flag overrides the same field of `--config`.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct GenFlags {
    /// JSON file with generation config fields; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Token core fraction of positive activations [default: 0.4].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sentence core fraction of neurons with nonzero frequency [default: 0.2].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Group core fraction for similarity-guided plans [default: 0.2].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Jaccard threshold for a stable prompt [default: 0.85].
    #[arg(long)]
    pub tau_stability: Option<f64>,
    /// auto, force_stability, force_similarity or dense [default: auto].
    #[arg(long)]
    pub strategy: Option<String>,
    /// Tokens to generate [default: 32].
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// greedy or top_k [default: greedy].
    #[arg(long)]
    pub sampling: Option<String>,
    /// Candidates kept by top_k sampling; implies --sampling top_k.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Semantic group store (groups.cinfstore) for similarity-guided plans.
    #[arg(long = "store", alias = "store-path")]
    pub store_path: Option<PathBuf>,
    /// Layer for stability estimation and group assignment [default: store's, else floor(0.78·L)].
    #[arg(long)]
    pub reference_layer: Option<usize>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RunArgs {
    /// Model bundle directory (config.json, weights.cinf, vocab.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt file: a JSON array of token ids, or {"ids": [...]}.
    #[arg(long)]
    pub prompt: PathBuf,
    /// Treat a non-JSON prompt file as raw text and encode it by greedy
    /// longest match against vocab.json. This only approximates the source
    /// tokenizer.
    #[arg(long)]
    pub vocab_detok_only: bool,
    /// Output directory for report.json, generated.txt and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for all randomness (top_k sampling).
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines corpus of {"ids": [...]} records.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; one seq_NNNN subdirectory per sequence.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    /// Layer for the summary stability curve [default: floor(0.78·L)].
    #[arg(long)]
    pub reference_layer: Option<usize>,
    /// Prefix lengths for the stability curve, clipped to each sequence.
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200,300")]
    pub prefix_lengths: Vec<usize>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines corpus; "topic" labels, when present, define the groups.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for groups.cinfstore, wcss.csv and assignments.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    /// Clustering layer [default: floor(0.78·L)].
    #[arg(long)]
    pub reference_layer: Option<usize>,
    /// Fixed group count; bypasses the elbow search.
    #[arg(long)]
    pub k: Option<usize>,
    /// Largest k tried by the elbow search.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Cluster with K-means even when topic labels are present.
    #[arg(long)]
    pub ignore_labels: bool,
    /// Seed for K-means initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub kind: EvalKind,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", content = "args")]
pub enum EvalKind {
    /// Perplexity over the second half of each sequence.
    Ppl(PplArgs),
    /// Perplexity over an alpha × beta grid.
    Sweep(SweepArgs),
    /// Spearman correlation of core-set similarity with pair labels.
    Spearman(SpearmanArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalCommon {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplMode {
    Dense,
    Plan,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PplArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, value_enum, default_value_t = PplMode::Dense)]
    pub mode: PplMode,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    pub betas: Vec<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SpearmanArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    /// Layer whose sentence core sets are compared [default: floor(0.78·L)].
    #[arg(long)]
    pub reference_layer: Option<usize>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt file as for `run`; a seeded random prompt is used when absent.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    /// Length of the random prompt.
    #[arg(long, default_value_t = 64)]
    pub prompt_len: usize,
    /// Output directory for bench.csv and bench.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Sparse arms; a dense arm always runs first.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,1.0")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    pub new_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Seed for the random prompt.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 6 layers, d_model 64, 256 ReLU neurons, LayerNorm, learned positions.
    Tiny,
    /// As tiny with gated SiLU, RMSNorm and RoPE.
    TinyGated,
    /// 4 layers, d_model 512, 4096 ReLU neurons.
    Bench,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Bundle directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequences to write to corpus.jsonl.
    #[arg(long, default_value_t = 0)]
    pub sequences: usize,
    /// Topic labels for corpus.jsonl; 0 writes unlabeled uniform tokens.
    #[arg(long, default_value_t = 0)]
    pub topics: usize,
    /// Labeled pairs to write to pairs.jsonl (needs --topics >= 2).
    #[arg(long, default_value_t = 0)]
    pub pairs: usize,
    #[arg(long, default_value_t = 16)]
    pub min_len: usize,
    #[arg(long, default_value_t = 48)]
    pub max_len: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory override; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

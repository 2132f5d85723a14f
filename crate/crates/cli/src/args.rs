use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "styleknn",
    version,
    about = "Style-locality kNN language modeling"
)]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads [default: logical processors]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic styled corpus and its taxonomy.
    SynthCorpus(SynthArgs),
    /// Tokenize a JSONL corpus into a data directory.
    Ingest(IngestArgs),
    /// Train the reference language model.
    TrainLm(TrainLmArgs),
    /// Encode every training position into a datastore.
    BuildDatastore(BuildDatastoreArgs),
    /// Build an inverted-file index over a datastore.
    BuildIvf(BuildIvfArgs),
    /// Fit locality distance scales for one feature set.
    TrainLocality(TrainLocalityArgs),
    /// Perplexity of the bare or interpolated model.
    EvalPpl(EvalPplArgs),
    /// Train and evaluate every locality feature set.
    Ablate(AblateArgs),
    /// Style-by-style similarity of mean context keys.
    Heatmap(HeatmapArgs),
    /// Continue prompts in a target style.
    Generate(GenerateArgs),
    /// Side-by-side continuations from two models.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceArg {
    SquaredL2,
    L2,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Corpus JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    /// Taxonomy file output.
    #[arg(long)]
    pub taxonomy_out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub categories: usize,
    #[arg(long, default_value_t = 1)]
    pub styles_per_category: usize,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    #[arg(long, default_value_t = 200)]
    pub docs_per_style: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// JSONL records with `text`, `style`, `source` and optional `split`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Taxonomy file [default: built-in reference taxonomy]
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub min_count: u64,
    /// Assign records without a split 80/10/10 instead of to train.
    #[arg(long)]
    pub auto_split: bool,
    /// Output data directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub context_window: usize,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    /// Key dimension d.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatastoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DistanceArg::SquaredL2)]
    pub distance: DistanceArg,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildIvfArgs {
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_clusters: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrievalArgs {
    /// Neighbors per query.
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Search through this IVF index instead of exhaustively.
    #[arg(long)]
    pub ivf: Option<PathBuf>,
    /// Clusters probed per query [default: a quarter of the clusters]
    #[arg(long, requires = "ivf")]
    pub n_probe: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainLocalityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    /// Comma-separated subset of style,source,category, or `none`.
    #[arg(long)]
    pub features: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Training positions drawn from the datastore's documents.
    #[arg(long, default_value_t = 100_000)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Keep only same-style neighbors when the weights are used.
    #[arg(long)]
    pub restrict_style: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPplArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Without a datastore the bare model is evaluated.
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    /// Locality weights [default: no locality features]
    #[arg(long, requires = "datastore")]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Fixed λ; when absent, λ is searched on the validation split.
    #[arg(long, requires = "datastore")]
    pub lambda: Option<f64>,
    /// λ grid for the search [default: 0, 0.05, ..., 1]
    #[arg(long, value_delimiter = ',', conflicts_with = "lambda")]
    pub grid: Option<Vec<f64>>,
    /// Restrict retrieval to the document's own style.
    #[arg(long, requires = "datastore")]
    pub restrict_style: bool,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report JSON output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Feature sets to evaluate, `;`-separated [default: all seven rows]
    #[arg(long, value_delimiter = ';')]
    pub rows: Option<Vec<String>>,
    /// Use these trained weights instead of fitting them.
    #[arg(long)]
    pub weights: Vec<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON copy of the matrix.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 20)]
    pub max_new_tokens: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Sample only among this many most likely tokens (0 = all).
    #[arg(long, default_value_t = 0, requires = "temperature")]
    pub top_k_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, default_value_t = 0.25)]
    pub lambda: f64,
    /// Target style name.
    #[arg(long)]
    pub style: String,
    /// Target source name [default: first source]
    #[arg(long)]
    pub source: Option<String>,
    /// Prompt text; repeat for several prompts.
    #[arg(long, required_unless_present = "prompts_file")]
    pub prompt: Vec<String>,
    /// File with one prompt per line.
    #[arg(long)]
    pub prompts_file: Option<PathBuf>,
    #[arg(long)]
    pub restrict_style: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    /// Checkpoint for model B [default: --model]
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    /// Datastore for model B [default: --datastore]
    #[arg(long)]
    pub datastore_b: Option<PathBuf>,
    /// Model scoring continuation fluency [default: --model]
    #[arg(long)]
    pub reference_model: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long)]
    pub weights_a: Option<PathBuf>,
    #[arg(long)]
    pub weights_b: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub lambda_a: f64,
    #[arg(long, default_value_t = 0.25)]
    pub lambda_b: f64,
    #[arg(long)]
    pub restrict_a: bool,
    #[arg(long)]
    pub restrict_b: bool,
    /// Prompts taken from the first halves of test documents.
    #[arg(long, default_value_t = 100)]
    pub prompts: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// JSONL output, one line per prompt.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON with the aggregate win rates.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

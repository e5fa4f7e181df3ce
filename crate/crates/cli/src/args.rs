use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sugmine::config::AugmentMethod;
use sugmine::corpus::Format;
use sugmine::Domain;

#[derive(Debug, Parser)]
#[command(name = "sugmine", version, about = "Open-domain suggestion mining over product and service reviews")]
pub struct Cli {
    /// Worker threads for stage-internal parallelism. Results do not depend
    /// on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Seed applied to every stage; overrides config values.
    #[arg(long, global = true, env = "SUGMINE_SEED")]
    pub seed: Option<u64>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw corpus and write it as canonical JSONL.
    Ingest(IngestArgs),
    /// Spell-correct and lemmatize review texts.
    Preprocess(PreprocessArgs),
    /// Train skip-gram word embeddings.
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Fit the baseline suggestion classifier used for pruning.
    TrainBaseline(TrainBaselineArgs),
    /// Oversample the suggestion class.
    Augment(AugmentArgs),
    /// Train the transformer classifier.
    Train(TrainArgs),
    /// Score a test set against a trained artifact bundle.
    Evaluate(EvaluateArgs),
    /// Run every stage from a config file.
    Run(RunArgs),
    /// Attention saliency of a review, with optional heatmap and word clouds.
    Explain(ExplainArgs),
    /// SAGE discriminating tokens of one domain's suggestions.
    Sage(SageArgs),
    /// Write a synthetic labelled corpus.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Discourse,
    Smote,
    None,
}

impl From<MethodArg> for AugmentMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Discourse => AugmentMethod::Discourse,
            MethodArg::Smote => AugmentMethod::Smote,
            MethodArg::None => AugmentMethod::None,
        }
    }
}

/// Optional config file shared by the stage commands.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra dictionary words, one per line.
    #[arg(long)]
    pub wordlist: Option<PathBuf>,
    /// Minimum similarity for a spelling correction.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Where to write the correction lexicon (JSON).
    #[arg(long)]
    pub lexicon_out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainEmbeddingsArgs {
    /// Preprocessed JSONL; only train-split rows are used.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Existing embeddings to fine-tune from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    /// Baseline classifier JSON; required for discourse augmentation.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "discourse")]
    pub method: MethodArg,
    /// Discourse and none write a dataset; smote writes synthetic feature
    /// vectors, one JSON object per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated discourse markers.
    #[arg(long, value_delimiter = ',')]
    pub markers: Option<Vec<String>>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    /// Model checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// SMOTE vectors from `augment --method smote`.
    #[arg(long)]
    pub smote: Option<PathBuf>,
    /// Lexicon from `preprocess --lexicon-out`, stored with the artifacts.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Also write a complete artifact bundle usable by `evaluate`.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Raw test reviews; every row is scored.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    /// Reviews to look the id up in (raw text).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub review_id: Option<String>,
    /// Saliency JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG heatmap of the review.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Directory for per-domain attention word-cloud data over the
    /// suggestion reviews of the input.
    #[arg(long)]
    pub wordcloud_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SageArgs {
    /// Reviews to analyse; preprocessed text gives cleaner tokens.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub domain: Domain,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Rank by |eta| instead of eta.
    #[arg(long)]
    pub by_magnitude: bool,
    /// Word-cloud data built from the positive entries.
    #[arg(long)]
    pub wordcloud: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub n_reviews: usize,
    /// Non-suggestions per suggestion.
    #[arg(long, default_value_t = 10.0)]
    pub imbalance: f64,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
}

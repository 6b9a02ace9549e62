//! `lmforge`: one binary, one subcommand per task.
//!
//! Exit codes: 0 success, 1 domain error (bad data, invalid config, provider
//! failure), 2 usage error.

mod commands;
mod inputs;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lmforge", version, about = "Language-model operations toolkit")]
pub struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Debug logging on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Where to reach a chat/embedding provider.
#[derive(Debug, Clone, Args, Default)]
pub struct ProviderArgs {
    /// Provider base URL (`mock://…` for the built-in mock). Falls back to LMFORGE_PROVIDER_URL.
    #[arg(long = "provider", value_name = "URL")]
    pub provider_url: Option<String>,
    /// Model name. Falls back to LMFORGE_MODEL.
    #[arg(long = "model", value_name = "NAME")]
    pub model: Option<String>,
    /// Wire dialect: openai or ollama.
    #[arg(long)]
    pub dialect: Option<String>,
    #[arg(long, value_name = "SECS")]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u64>,
}

/// Keys of the unified training dictionary.
#[derive(Debug, Clone, Args, Default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long = "epochs", alias = "num-train-epochs")]
    pub num_train_epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    pub seed: Option<i64>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optim: Option<String>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Distillation weights for MSE and cosine, e.g. `0.5,0.5`.
    #[arg(long, value_delimiter = ',')]
    pub loss_weights: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP chat gateway.
    Serve(ServeArgs),
    /// Label a CSV of texts with an LLM.
    Label(LabelArgs),
    /// Embed a CSV of texts into a flat vector file.
    Embed(EmbedArgs),
    /// Build a searchable index from a CSV of texts.
    Index(IndexArgs),
    /// Query an index.
    Search(SearchArgs),
    /// Reorder documents by relevance to a query.
    Rerank(RerankArgs),
    /// Learn a byte-level BPE tokenizer from a corpus.
    TrainTokenizer(TrainTokenizerArgs),
    /// Apply MLM masking to token-id sequences.
    Mask(MaskArgs),
    /// Train a softmax head over provider embeddings.
    TrainClassifier(TrainClassifierArgs),
    /// Predict labels with a trained classifier.
    Classify(ClassifyArgs),
    /// Fit a small student to a teacher's embedding space.
    Distill(DistillArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Environment variable holding the bearer token.
    #[arg(long, value_name = "VAR")]
    pub auth_token_env: Option<String>,
    /// Append-only JSON-lines file that persists conversation memory.
    #[arg(long, value_name = "FILE")]
    pub memory_journal: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// `{"labels": {name: condition, …}, "multi_label": bool}`
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "CSV")]
    pub output: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    #[arg(long)]
    pub multi_label: bool,
    #[arg(long)]
    pub concurrency: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    /// flat or hnsw.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    /// Column holding integer document ids; row numbers are used otherwise.
    #[arg(long)]
    pub id_col: Option<String>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub m: Option<u64>,
    #[arg(long)]
    pub ef_construction: Option<u64>,
    #[arg(long)]
    pub ef_search: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// `key=value`; repeat to require several.
    #[arg(long)]
    pub filter: Vec<String>,
    #[arg(long)]
    pub ef_search: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub query: String,
    /// One document per line.
    #[arg(long, value_name = "FILE")]
    pub docs: PathBuf,
    /// http-scorer, llm-judge or embedding.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<u64>,
    #[arg(long, value_name = "URL")]
    pub scorer_url: Option<String>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Plain text, one document per line.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: Option<u64>,
    #[arg(long)]
    pub min_frequency: Option<u64>,
    #[arg(long)]
    pub max_length: Option<u64>,
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// One sequence of whitespace-separated token ids per line.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// JSON lines of `{"input_ids", "labels"}`; stdout when omitted.
    #[arg(long = "out", value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub mlm_probability: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random replacements are drawn below this id.
    #[arg(long)]
    pub vocab_size: Option<u64>,
    /// Take the vocabulary size from a saved tokenizer.
    #[arg(long, value_name = "DIR")]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long, value_name = "CSV")]
    pub csv: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    #[arg(long, default_value = "label")]
    pub label_col: String,
    #[arg(long = "out", value_name = "FILE", default_value = "classifier.bin")]
    pub output: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Trained classifier file.
    #[arg(long = "model", value_name = "FILE")]
    pub model_file: PathBuf,
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    /// CSV of predictions; stdout when omitted.
    #[arg(long = "out", value_name = "CSV")]
    pub output: Option<PathBuf>,
    /// Embedding provider; defaults to the one recorded at training time.
    #[arg(long = "provider", value_name = "URL")]
    pub provider_url: Option<String>,
    #[arg(long = "provider-model", value_name = "NAME")]
    pub provider_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher embedding endpoint.
    #[arg(long = "teacher", value_name = "URL")]
    pub teacher_url: Option<String>,
    #[arg(long = "teacher-model", value_name = "NAME")]
    pub teacher_model: Option<String>,
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    /// linear or mlp1.
    #[arg(long)]
    pub student: Option<String>,
    #[arg(long)]
    pub in_dim: Option<u64>,
    #[arg(long)]
    pub hidden: Option<u64>,
    #[arg(long)]
    pub featurizer_seed: Option<u64>,
    #[arg(long = "out", value_name = "FILE", default_value = "student.bin")]
    pub output: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(format!("lmforge={level},{level}")));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_logging(cli.verbose);
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

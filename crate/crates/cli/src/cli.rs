use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "rcakb", version, about = "Root-cause knowledge base builder and query service")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Pipeline mode: plain, rag or hybrid.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Similarity threshold (retrieval or compression).
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate and normalize a raw ticket file.
    Ingest(IngestArgs),
    /// Stratified train/eval split.
    Split(SplitArgs),
    /// Train skip-gram word embeddings on ticket text.
    TrainEmbeddings(TrainArgs),
    /// Extract rules from tickets and build the knowledge base.
    BuildKb(BuildArgs),
    /// Cluster rules with similar anomalies.
    Compress(CompressArgs),
    /// Score generated texts against references.
    Evaluate(EvaluateArgs),
    /// Compare analysis quality with and without prompt templates.
    Ablate(AblateArgs),
    /// List, approve or reject draft rules.
    Review(ReviewArgs),
    /// Retrieve knowledge base entries similar to an anomaly.
    Query(QueryArgs),
    /// Serve the knowledge base over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Default)]
pub struct BackendArgs {
    /// Base backend: mock, scripted or http.
    #[arg(long)]
    pub backend: Option<String>,
    /// Fixture file for the scripted base backend.
    #[arg(long, value_name = "PATH")]
    pub fixture: Option<String>,
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Domain model backend used in hybrid mode.
    #[arg(long)]
    pub dllm: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub dllm_fixture: Option<String>,
    #[arg(long, value_name = "URL")]
    pub dllm_endpoint: Option<String>,
    #[arg(long)]
    pub max_token: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EmbedArgs {
    /// Skip-gram model file; hash embeddings are used otherwise.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Dimension of the hash embedder.
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write prompt/expected-output example pairs.
    #[arg(long, value_name = "PATH")]
    pub pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    /// Tab-separated related word pairs for a top-k accuracy check.
    #[arg(long, value_name = "PATH")]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    /// Knowledge base directory holding the rule store.
    #[arg(long, value_name = "DIR", default_value = "kb")]
    pub kb: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON lines with `generated` and `reference` fields.
    #[arg(long, value_name = "PATH")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Extra synonym pairs, one tab-separated pair per line.
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Args, Debug)]
pub struct ReviewArgs {
    #[command(subcommand)]
    pub action: ReviewAction,
    #[arg(long, value_name = "DIR", default_value = "kb", global = true)]
    pub kb: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ReviewAction {
    /// Show draft rules.
    List,
    Approve(VerdictArgs),
    Reject(VerdictArgs),
}

#[derive(Args, Debug)]
pub struct VerdictArgs {
    pub rule_id: String,
    #[arg(long, default_value = "reviewer")]
    pub reviewer: String,
    #[arg(long, default_value = "")]
    pub note: String,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long, value_name = "DIR", default_value = "kb")]
    pub kb: PathBuf,
    /// Anomaly description to search for.
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, value_name = "DIR", default_value = "kb")]
    pub kb: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn parse_opt<T: std::str::FromStr>(value: &Option<String>, what: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("--{what}: {e}"))))
        .transpose()
}

impl Cli {
    /// Flag values that feed the layered settings.
    pub fn overrides(&self, backend: Option<&BackendArgs>, embed: Option<&EmbedArgs>, k: Option<usize>) -> Result<Overrides, CliError> {
        let mut o = Overrides {
            mode: parse_opt(&self.mode, "mode")?,
            threshold: self.threshold,
            seed: self.seed,
            k,
            ..Overrides::default()
        };
        if let Some(b) = backend {
            o.backend = parse_opt(&b.backend, "backend")?;
            o.fixture = b.fixture.clone();
            o.endpoint = b.endpoint.clone();
            o.dllm = parse_opt(&b.dllm, "dllm")?;
            o.dllm_fixture = b.dllm_fixture.clone();
            o.dllm_endpoint = b.dllm_endpoint.clone();
            o.max_token = b.max_token;
            o.parallelism = b.parallelism;
        }
        if let Some(e) = embed {
            o.embeddings = e.embeddings.clone();
            o.embed_dim = e.embed_dim;
        }
        Ok(o)
    }
}

//! Command-line surface: one binary, subcommand style, with a shared
//! config file (`--config`), a global seed, and a thread-count knob.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ragkit",
    about = "Embedding diagnostics, organ-indexed sentence retrieval, and adaptive RAG decoding",
    version
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed every random decision derives from.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = auto). Outputs are identical across settings.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic corpus with a ground-truth
    /// manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Report spectrum metrics (total dim, dim90, dim95, PR) per
    /// embedding file.
    Diagnose(DiagnoseArgs),
    /// Train linear probes on frozen embeddings and report eval AUC per
    /// finding.
    Probe(ProbeArgs),
    /// Compare probe AUC on top-k vs tail-half principal components.
    ProjectTest(ProjectTestArgs),
    /// Build the organ-indexed sentence database from paragraphs,
    /// embeddings, and labels.
    BuildDb(BuildDbArgs),
    /// Query a database index around a stored record.
    Retrieve(RetrieveArgs),
    /// Evaluate retrieval quality (Jaccard@k by modality, or the label
    /// upper bound).
    EvalRetrieval(EvalRetrievalArgs),
    /// Run a scripted decode under a context-injection policy.
    Decode(DecodeArgs),
    /// Build oracle-mixed training samples with loss-mask spans.
    PrepTrain(PrepTrainArgs),
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 100)]
    pub studies: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub image_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.3)]
    pub prevalence: f64,
    /// none | tail-dim | isotropic
    #[arg(long, default_value = "none")]
    pub mode: String,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// AEMB embedding files, one table row each.
    #[arg(required = true)]
    pub embeddings: Vec<PathBuf>,
    /// Optional JSONL report (one record per embedding space).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub train_emb: PathBuf,
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long)]
    pub eval_emb: PathBuf,
    #[arg(long)]
    pub eval_labels: PathBuf,
    /// Findings to probe (defaults to every finding present in both
    /// label tables).
    #[arg(long)]
    pub finding: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long)]
    pub no_class_balance: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProjectTestArgs {
    #[arg(long)]
    pub train_emb: PathBuf,
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long)]
    pub eval_emb: PathBuf,
    #[arg(long)]
    pub eval_labels: PathBuf,
    #[arg(long)]
    pub finding: String,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildDbArgs {
    /// Directory of per-organ paragraph files (`<organ>.jsonl`).
    #[arg(long)]
    pub paragraphs: PathBuf,
    /// Sentence embeddings keyed by sentence id.
    #[arg(long)]
    pub sent_emb: PathBuf,
    /// Directory of per-organ study image embeddings (`<organ>.aemb`).
    #[arg(long)]
    pub img_emb: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Organ-to-finding grouping (defaults to the 18-finding chest-CT
    /// map).
    #[arg(long)]
    pub finding_map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub organ: String,
    /// Stored record to query around: a sentence id (text space) or a
    /// study id (image space).
    #[arg(long)]
    pub query_id: String,
    /// text | image
    #[arg(long, default_value = "text")]
    pub space: String,
    /// Neighbourhood size (default 10).
    #[arg(long)]
    pub k: Option<usize>,
    /// Drop all entries of one study before ranking (leave-one-out).
    #[arg(long)]
    pub exclude_study: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// img2img | img2txt | txt2txt | upper
    #[arg(long)]
    pub modality: String,
    #[arg(long)]
    pub organ: String,
    /// Neighbourhood size (default 10).
    #[arg(long)]
    pub k: Option<usize>,
    /// Keep the query's own study among the neighbours (default is
    /// leave-one-out).
    #[arg(long)]
    pub include_self: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one record per query to --out.
    #[arg(long)]
    pub per_query: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// norag | fixed:N | adaptive:K
    #[arg(long)]
    pub policy: String,
    /// twostage | text2text (default text2text).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Decode script (steps, overrides, organ plan).
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long)]
    pub trace_out: PathBuf,
    /// Study whose image embeddings drive two-stage retrieval (defaults
    /// to the script's study_id); also excluded from results.
    #[arg(long)]
    pub query_study: Option<String>,
}

#[derive(Args, Debug)]
pub struct PrepTrainArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub perplexities: PathBuf,
    /// Marking threshold percentile (default 80).
    #[arg(long)]
    pub percentile: Option<f64>,
    /// Oracle-context probability (default 0.7).
    #[arg(long)]
    pub p_oracle: Option<f64>,
    /// Trigger cap per sample (default 4).
    #[arg(long)]
    pub k_rag: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// twostage | text2text (default twostage).
    #[arg(long)]
    pub strategy: Option<String>,
    /// per-report | corpus-wide (default per-report).
    #[arg(long)]
    pub scope: Option<String>,
    /// Optional assembly log (oracle sources, fallbacks, drops).
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

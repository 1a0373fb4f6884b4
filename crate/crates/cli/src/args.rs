use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "w2w",
    version,
    about = "Build W2W spaces over LoRA corpora and edit adapters along preference directions"
)]
pub struct Cli {
    /// Pipeline config file (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log more on standard error (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarise a tensor archive and the adapter it holds.
    Inspect(InspectArgs),
    /// Check the config file and every path it references.
    Validate,
    /// Reduce every manifest adapter to per-layer top-1 triplets.
    Reduce(ReduceArgs),
    /// Fit the PCA space over a reduced corpus.
    BuildSpace(BuildSpaceArgs),
    /// Label adapters from embedding similarities.
    Label(LabelArgs),
    /// Train a preference direction in a space.
    LearnDirection(LearnArgs),
    /// Apply one edit and export the rank-1 adapter.
    Edit(EditArgs),
    /// Export one edited adapter per edit strength.
    Sweep(SweepArgs),
    /// Write a synthetic corpus with planted structure.
    GenSynthetic(GenArgs),
    /// Evaluation reports.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Fetch embeddings from an HTTP endpoint into a table.
    FetchEmbeds(FetchArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// JSON-lines manifest of adapters.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for the reduced corpus.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layer preset (all, unet, ff-attn-v, attn-v) or comma list of patterns.
    #[arg(long)]
    pub layers: Option<String>,
    /// Keep only adapters of this rank.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Keep only adapters for this base model.
    #[arg(long)]
    pub base_model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Auto,
    Gram,
    Covariance,
}

#[derive(Debug, Args)]
pub struct BuildSpaceArgs {
    /// Reduced corpus directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Space archive to write (a `.json` sidecar goes next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of principal components.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum, default_value_t = Method::Auto)]
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelMode {
    /// Gate/positive/negative prompt thresholds.
    Threshold,
    /// Quantiles of similarity to a user's preference cluster.
    User,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, value_enum)]
    pub mode: LabelMode,
    /// Example-image embeddings, JSON lines with `id`, `adapter` and `v`.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Prompt embeddings with ids `gate`, `positive` and `negative` (threshold mode).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// The user's image embeddings (user mode).
    #[arg(long)]
    pub preference: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub user: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub gate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub positive: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub negative: Option<f64>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    #[arg(long)]
    pub min_samples: Option<usize>,
    #[arg(long)]
    pub representatives: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Direction JSON to write (vectors go to the same path with `.st`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out fraction per class.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Target {
    #[arg(long)]
    pub direction: PathBuf,
    #[arg(long)]
    pub space: PathBuf,
    /// Reduced corpus holding `--id`.
    #[arg(long, requires = "id")]
    pub corpus: Option<PathBuf>,
    /// Adapter id within `--corpus`.
    #[arg(long)]
    pub id: Option<String>,
    /// Adapter file to reduce and edit instead of a corpus entry.
    #[arg(long, conflicts_with_all = ["corpus", "id"])]
    pub adapter: Option<PathBuf>,
    /// Base model recorded in exported adapters.
    #[arg(long)]
    pub base_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub target: Target,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    /// Adapter file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub target: Target,
    /// Comma-separated edit strengths.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeometryArg {
    Dense,
    LayerScale,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub m_true: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Number of layers.
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = GeometryArg::LayerScale)]
    pub geometry: GeometryArg,
    /// Planted users; more than one builds the sign-symmetric multi-user corpus.
    #[arg(long, default_value_t = 1)]
    pub users: usize,
}

#[derive(Debug, Args)]
pub struct ReportOut {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Planted-versus-recovered subspace and direction.
    Recovery {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        direction: Option<PathBuf>,
        /// `ground_truth.json` from gen-synthetic.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        output: ReportOut,
    },
    /// Classifier score along an edit sweep.
    Curve {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Vec<f64>,
        #[command(flatten)]
        output: ReportOut,
    },
    /// Base vs full-rank vs rank-1 output similarity.
    Fidelity {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        rank1: PathBuf,
        #[command(flatten)]
        output: ReportOut,
    },
    /// Rank candidates by cosine to a reference embedding.
    Rank {
        #[arg(long)]
        candidates: PathBuf,
        /// Table holding the reference vector.
        #[arg(long)]
        reference: PathBuf,
        /// Reference id; may be omitted when the table has one entry.
        #[arg(long)]
        reference_id: Option<String>,
        #[arg(long)]
        top: Option<usize>,
        #[command(flatten)]
        output: ReportOut,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// JSON lines of `{"id", "path"}` or `{"id", "text"}`.
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    /// Embedding table (JSON lines) to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Endpoint URL; falls back to the config, then `W2W_EMBED_URL`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

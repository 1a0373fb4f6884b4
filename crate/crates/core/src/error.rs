use std::path::PathBuf;

use crate::linalg::SingularTriplet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed archive header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{0}` has no matching low-rank partner")]
    UnpairedTensor(String),

    #[error("layer `{layer}` has rank {found}, expected {expected}")]
    RankMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("tensor `{tensor}` has unsupported dtype {dtype}")]
    DtypeUnsupported { tensor: String, dtype: String },

    #[error("adapter has no layers")]
    EmptyBundle,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("power iteration did not converge (relative residual {residual:.3e})")]
    NotConverged { residual: f64, best: Box<SingularTriplet> },

    #[error("matrix has zero Frobenius norm")]
    DegenerateMatrix,

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("basis rows are not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no adapter satisfies the corpus filters")]
    EmptySelection,

    #[error("adapter `{0}` has no layer matching the layer patterns")]
    NoMatchingLayers(String),

    #[error("corpus layer sets differ: only in `{first}`: {only_first:?}; only in `{other}`: {only_other:?}")]
    HeterogeneousCorpus {
        first: String,
        other: String,
        only_first: Vec<String>,
        only_other: Vec<String>,
    },

    #[error("layout mismatch: expected {expected}, found {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("corpus too small: need at least {needed} vectors, got {got}")]
    CorpusTooSmall { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few items: need at least {needed}, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("no component reached the minimum cluster size; every item is noise")]
    AllNoise,

    #[error("adapter `{0}` has no example embeddings")]
    NoExamples(String),

    #[error("id sets differ: {0}")]
    IdSetMismatch(String),

    #[error("embedding `{0}` has zero norm")]
    ZeroVector(String),

    #[error("only one class present after dropping excluded adapters ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("labelled adapter `{0}` has no weight vector in the corpus")]
    UnknownAdapter(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("embedding endpoint failed for {failed_ids:?}: {reason}")]
    Endpoint { failed_ids: Vec<String>, reason: String },

    #[error("embedding dimension drifted from {expected} to {got}")]
    DimensionDrift { expected: usize, got: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an I/O failure with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(layer: &str, source: Error) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(source),
        }
    }

    /// Stable machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoFailure",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::UnpairedTensor(_) => "UnpairedTensor",
            Error::RankMismatch { .. } => "RankMismatch",
            Error::DtypeUnsupported { .. } => "DtypeUnsupported",
            Error::EmptyBundle => "EmptyBundle",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotConverged { .. } => "NotConverged",
            Error::DegenerateMatrix => "DegenerateMatrix",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::NotOrthonormal(_) => "NotOrthonormal",
            Error::Layer { source, .. } => source.kind(),
            Error::EmptySelection => "EmptySelection",
            Error::NoMatchingLayers(_) => "NoMatchingLayers",
            Error::HeterogeneousCorpus { .. } => "HeterogeneousCorpus",
            Error::LayoutMismatch { .. } => "LayoutMismatch",
            Error::CorpusTooSmall { .. } => "CorpusTooSmall",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::TooFewItems { .. } => "TooFewItems",
            Error::AllNoise => "AllNoise",
            Error::NoExamples(_) => "NoExamples",
            Error::IdSetMismatch(_) => "IdSetMismatch",
            Error::ZeroVector(_) => "ZeroVector",
            Error::SingleClass { .. } => "SingleClass",
            Error::SpaceMismatch(_) => "SpaceMismatch",
            Error::UnknownAdapter(_) => "UnknownAdapter",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Endpoint { .. } => "EndpointError",
            Error::DimensionDrift { .. } => "DimensionDrift",
            Error::Json(_) => "Json",
        }
    }
}

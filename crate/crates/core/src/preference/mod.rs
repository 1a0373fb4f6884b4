//! Per-user preference labels from embedding tables.

mod cluster;
mod embedding;
mod labels;

pub use cluster::{cluster_embeddings, select_representatives, ClusterParams, ClusterResult};
pub use embedding::{dot, normalize, read_grouped_jsonl, EmbeddingTable, Modality, UNIT_TOLERANCE};
pub use labels::{
    label_by_quantile, label_corpus, score_adapter, score_corpus, threshold_label, Label, LabelRule,
    PreferenceLabelSet, ScoreRecord, Thresholds,
};

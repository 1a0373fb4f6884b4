use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::embedding::{dot, normalize, EmbeddingTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
    #[serde(rename = "excluded")]
    Excluded,
}

impl Label {
    /// ±1 for labelled adapters.
    pub fn sign(self) -> Option<f64> {
        match self {
            Label::Positive => Some(1.0),
            Label::Negative => Some(-1.0),
            Label::Excluded => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
            Label::Excluded => Label::Excluded,
        }
    }
}

/// Gate / positive / negative similarity thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub gate: f64,
    pub positive: f64,
    pub negative: f64,
}

impl Default for Thresholds {
    /// Person gate 0.2, realistic 0.26 → +1, anime 0.24 → −1.
    fn default() -> Self {
        Self {
            gate: 0.2,
            positive: 0.26,
            negative: 0.24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Three score maps against fixed thresholds; adapters high on both
    /// target scores are excluded as ambiguous.
    Threshold(Thresholds),
    /// One score map: top `q` fraction → +1, bottom `q` fraction → −1.
    Quantile { q: f64, positive: f64, negative: f64 },
    /// Ground-truth labels of a seeded synthetic corpus.
    Planted { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate: Option<f64>,
    pub positive: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLabelSet {
    pub user_id: String,
    pub rule: LabelRule,
    pub labels: BTreeMap<String, Label>,
    pub scores: BTreeMap<String, ScoreRecord>,
}

impl PreferenceLabelSet {
    pub fn count(&self, label: Label) -> usize {
        self.labels.values().filter(|&&l| l == label).count()
    }

    /// Same set with +1 and −1 swapped.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.labels.values_mut().for_each(|l| *l = l.flipped());
        out
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Mean cosine between an adapter's example embeddings and a reference.
pub fn score_adapter(adapter_id: &str, examples: &EmbeddingTable, reference: &[f32]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::NoExamples(adapter_id.to_string()));
    }
    if examples.dim() != Some(reference.len()) {
        return Err(Error::DimensionMismatch {
            expected: examples.dim().unwrap_or(0),
            got: reference.len(),
        });
    }
    let reference = normalize("reference", reference)?;
    let total: f64 = examples.iter().map(|(_, v)| dot(v, &reference)).sum();
    Ok(total / examples.len() as f64)
}

/// Scores every adapter group against one reference.
pub fn score_corpus(groups: &BTreeMap<String, EmbeddingTable>, reference: &[f32]) -> Result<BTreeMap<String, f64>> {
    groups
        .iter()
        .map(|(id, t)| score_adapter(id, t, reference).map(|s| (id.clone(), s)))
        .collect()
}

fn same_keys(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>, what: &str) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let ka: BTreeSet<_> = a.keys().collect();
        let kb: BTreeSet<_> = b.keys().collect();
        let diff: Vec<_> = ka.symmetric_difference(&kb).take(5).collect();
        return Err(Error::IdSetMismatch(format!("{what}: e.g. {diff:?}")));
    }
    Ok(())
}

pub fn threshold_label(gate: f64, positive: f64, negative: f64, t: &Thresholds) -> Label {
    if gate < t.gate {
        return Label::Excluded;
    }
    let pos = positive >= t.positive;
    let neg = negative >= t.negative;
    match (pos, neg) {
        (true, true) => Label::Excluded,
        (true, false) => Label::Positive,
        (false, true) => Label::Negative,
        (false, false) => Label::Excluded,
    }
}

/// Fixed-threshold labelling from gate, positive-style and
/// negative-style score maps over the same adapters.
pub fn label_corpus(
    user_id: &str,
    gate: &BTreeMap<String, f64>,
    positive: &BTreeMap<String, f64>,
    negative: &BTreeMap<String, f64>,
    thresholds: Thresholds,
) -> Result<PreferenceLabelSet> {
    same_keys(gate, positive, "gate vs positive")?;
    same_keys(gate, negative, "gate vs negative")?;
    let mut labels = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for (id, &g) in gate {
        let (p, n) = (positive[id], negative[id]);
        labels.insert(id.clone(), threshold_label(g, p, n, &thresholds));
        scores.insert(
            id.clone(),
            ScoreRecord {
                gate: Some(g),
                positive: p,
                negative: Some(n),
            },
        );
    }
    Ok(PreferenceLabelSet {
        user_id: user_id.to_string(),
        rule: LabelRule::Threshold(thresholds),
        labels,
        scores,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-user labelling from a single similarity score: scores at or above
/// the upper `q` quantile are +1, at or below the lower `q` quantile −1.
pub fn label_by_quantile(user_id: &str, scores: &BTreeMap<String, f64>, q: f64) -> Result<PreferenceLabelSet> {
    if !(q > 0.0 && q < 0.5) {
        return Err(Error::InvalidInput(format!("quantile {q} must lie in (0, 0.5)")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to label".into()));
    }
    let mut sorted: Vec<f64> = scores.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let upper = quantile(&sorted, 1.0 - q);
    let lower = quantile(&sorted, q);
    let mut labels = BTreeMap::new();
    let mut records = BTreeMap::new();
    for (id, &s) in scores {
        let label = match (s >= upper, s <= lower) {
            (true, false) => Label::Positive,
            (false, true) => Label::Negative,
            _ => Label::Excluded,
        };
        labels.insert(id.clone(), label);
        records.insert(
            id.clone(),
            ScoreRecord {
                gate: None,
                positive: s,
                negative: None,
            },
        );
    }
    Ok(PreferenceLabelSet {
        user_id: user_id.to_string(),
        rule: LabelRule::Quantile {
            q,
            positive: upper,
            negative: lower,
        },
        labels,
        scores: records,
    })
}

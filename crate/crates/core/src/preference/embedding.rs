use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};

/// Vectors must be unit length within this tolerance after ingest.
pub const UNIT_TOLERANCE: f64 = 1e-5;

const EMBEDDINGS_TENSOR: &str = "__embeddings__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidInput(format!("unknown modality `{other}`"))),
        }
    }
}

/// Unit-normalised embeddings keyed by item id (iterated in id order).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub modality: Modality,
    pub source: String,
    vectors: BTreeMap<String, Vec<f32>>,
    dim: Option<usize>,
}

/// Normalises in f64 and rounds back to f32.
pub fn normalize(id: &str, v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector(id.to_string()));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl EmbeddingTable {
    pub fn new(modality: Modality, source: impl Into<String>) -> Self {
        Self {
            modality,
            source: source.into(),
            vectors: BTreeMap::new(),
            dim: None,
        }
    }

    pub fn from_pairs<I, S>(modality: Modality, source: &str, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut table = Self::new(modality, source);
        for (id, v) in pairs {
            table.insert(id, &v)?;
        }
        Ok(table)
    }

    /// Inserts (or replaces) a vector, normalising it.
    pub fn insert(&mut self, id: impl Into<String>, v: &[f32]) -> Result<()> {
        let id = id.into();
        match self.dim {
            Some(d) if d != v.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            None if v.is_empty() => return Err(Error::ZeroVector(id)),
            _ => {}
        }
        let unit = normalize(&id, v)?;
        self.dim = Some(v.len());
        self.vectors.insert(id, unit);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Sub-table with the given ids (missing ids are skipped).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new(self.modality, self.source.clone());
        for id in ids {
            if let Some(v) = self.vectors.get(id) {
                out.vectors.insert(id.to_string(), v.clone());
                out.dim = self.dim;
            }
        }
        out
    }

    /// Reads `{"id": …, "v": […]}` lines.
    pub fn read_jsonl(path: &Path, modality: Modality) -> Result<Self> {
        let mut table = Self::new(modality, path.display().to_string());
        for record in read_records(path)? {
            if table.vectors.contains_key(&record.id) {
                return Err(Error::InvalidInput(format!(
                    "{}: duplicate id `{}`",
                    path.display(),
                    record.id
                )));
            }
            table.insert(record.id, &record.v)?;
        }
        Ok(table)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (id, v) in &self.vectors {
            out.push_str(&serde_json::to_string(&EmbeddingRecord {
                id: id.clone(),
                v: v.clone(),
                adapter: None,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Binary cache: one N × e float32 tensor, ids in the metadata.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let ids: Vec<&str> = self.ids().collect();
        let dim = self.dim.unwrap_or(0);
        let data: Vec<f32> = self.vectors.values().flatten().copied().collect();
        let mut b = ArchiveBuilder::new();
        b.insert_metadata("ids", serde_json::to_string(&ids)?);
        b.insert_metadata("modality", self.modality.to_string());
        b.insert_metadata("source", self.source.clone());
        b.add_f32(EMBEDDINGS_TENSOR, vec![ids.len(), dim], &data)?;
        Ok(b.build())
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta = archive.metadata();
        let ids: Vec<String> = serde_json::from_str(
            meta.get("ids")
                .ok_or_else(|| Error::InvalidInput("embedding archive lacks `ids`".into()))?,
        )?;
        let modality: Modality = meta.get("modality").map(String::as_str).unwrap_or("image").parse()?;
        let info = archive
            .info(EMBEDDINGS_TENSOR)
            .ok_or_else(|| Error::InvalidInput(format!("archive lacks `{EMBEDDINGS_TENSOR}`")))?;
        let dim = *info.shape.get(1).unwrap_or(&0);
        let data = archive.tensor_f32(EMBEDDINGS_TENSOR)?;
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(
                "embedding archive shape disagrees with ids".into(),
            ));
        }
        let mut table = Self::new(modality, meta.get("source").cloned().unwrap_or_default());
        for (id, row) in ids.into_iter().zip(data.chunks_exact(dim.max(1))) {
            table.insert(id, row)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    v: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<String>,
}

fn read_records(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads example-image embeddings grouped by their `adapter` field.
pub fn read_grouped_jsonl(path: &Path, modality: Modality) -> Result<BTreeMap<String, EmbeddingTable>> {
    let mut groups: BTreeMap<String, EmbeddingTable> = BTreeMap::new();
    for record in read_records(path)? {
        let adapter = record.adapter.ok_or_else(|| {
            Error::InvalidInput(format!("{}: record `{}` lacks `adapter`", path.display(), record.id))
        })?;
        groups
            .entry(adapter)
            .or_insert_with(|| EmbeddingTable::new(modality, path.display().to_string()))
            .insert(record.id, &record.v)?;
    }
    Ok(groups)
}

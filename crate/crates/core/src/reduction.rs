//! Corpus selection, per-layer rank-1 reduction and the flattened weight
//! vectors the W2W space is built over.
//!
//! Each selected layer's composed update `ΔW = (alpha/r)·B·A` is replaced by
//! its leading triplet `(σ, u, v)`. Flattening writes `[√σ·u ; √σ·v]` per
//! layer, layers in lexicographic order, so a weight vector is a plain
//! concatenation of scaled singular vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{load_adapter_with, AdapterBundle, AlphaSource, LoraLayer, NamingPatterns};
use crate::archive::{ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_json_atomic};
use crate::linalg::{norm, top1_svd, FactoredOp, SingularTriplet, SvdOptions};

/// One line of a corpus manifest (JSON lines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub adapter_id: String,
    pub path: PathBuf,
    pub rank: usize,
    pub base_model: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// Reads a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())
}

/// A conjunction of substrings; a layer matches when its name contains all
/// of them. Written as `attn+to_v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerPattern(Vec<String>);

impl LayerPattern {
    pub fn matches(&self, layer: &str) -> bool {
        self.0.iter().all(|part| layer.contains(part.as_str()))
    }
}

impl FromStr for LayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<String> = s
            .split('+')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(String::from)
            .collect();
        if parts.is_empty() {
            return Err(Error::InvalidInput(format!("empty layer pattern `{s}`")));
        }
        Ok(Self(parts))
    }
}

impl TryFrom<String> for LayerPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerPattern> for String {
    fn from(p: LayerPattern) -> String {
        p.to_string()
    }
}

impl fmt::Display for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("+"))
    }
}

/// Which layers enter the layout. An empty pattern list selects every layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSelection(pub Vec<LayerPattern>);

impl LayerSelection {
    pub fn all() -> Self {
        Self(Vec::new())
    }

    /// Every UNet layer (the SVD-over-all-layers strategy).
    pub fn unet() -> Self {
        Self::parse_list("unet").expect("valid preset")
    }

    /// UNet feed-forward and attention-value layers.
    pub fn ff_attn_v() -> Self {
        Self::parse_list("unet+ff,unet+attn+to_v").expect("valid preset")
    }

    /// UNet attention-value layers only.
    pub fn attn_v() -> Self {
        Self::parse_list("unet+attn+to_v").expect("valid preset")
    }

    /// Comma-separated patterns, or one of the presets `all`, `unet`,
    /// `ff-attn-v`, `attn-v`.
    pub fn parse_list(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Self::all()),
            "ff-attn-v" => Ok(Self::ff_attn_v()),
            "attn-v" => Ok(Self::attn_v()),
            other => other
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<_>>>()
                .map(Self),
        }
    }

    pub fn matches(&self, layer: &str) -> bool {
        self.0.is_empty() || self.0.iter().any(|p| p.matches(layer))
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("all");
        }
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFilter {
    pub rank: Option<usize>,
    pub base_model: Option<String>,
    /// Carried along for the reduction step; does not drop manifest entries.
    pub layers: LayerSelection,
}

/// Keeps manifest entries satisfying every given constraint.
pub fn filter_corpus(manifest: &[ManifestEntry], filter: &CorpusFilter) -> Result<Vec<ManifestEntry>> {
    let kept: Vec<ManifestEntry> = manifest
        .iter()
        .filter(|e| filter.rank.is_none_or(|r| e.rank == r))
        .filter(|e| filter.base_model.as_deref().is_none_or(|b| e.base_model == b))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSegment {
    pub name: String,
    /// Output dimension (length of `u`).
    pub d: usize,
    /// Input dimension (length of `v`).
    pub k: usize,
}

/// Canonical ordering and shapes of the flattened coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub segments: Vec<LayoutSegment>,
    pub total_dim: usize,
    pub hash: String,
}

impl LayoutDescriptor {
    pub fn new(mut segments: Vec<LayoutSegment>) -> Result<Self> {
        segments.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in segments.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::InvalidInput(format!("duplicate layer `{}`", pair[0].name)));
            }
        }
        let total_dim = segments.iter().map(|s| s.d + s.k).sum();
        let hash = layout_digest(&segments);
        Ok(Self {
            segments,
            total_dim,
            hash,
        })
    }

    fn of_triplets(triplets: &BTreeMap<String, SingularTriplet>) -> Result<Self> {
        Self::new(
            triplets
                .iter()
                .map(|(name, t)| LayoutSegment {
                    name: name.clone(),
                    d: t.u.len(),
                    k: t.v.len(),
                })
                .collect(),
        )
    }

    /// Start offset of every segment within θ.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.d + s.k;
                o
            })
            .collect()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let layout: Self = read_json(path)?;
        if layout_digest(&layout.segments) != layout.hash {
            return Err(Error::InvalidInput(format!(
                "{}: layout hash does not match segments",
                path.display()
            )));
        }
        Ok(layout)
    }
}

fn layout_digest(segments: &[LayoutSegment]) -> String {
    let mut text = String::new();
    for s in segments {
        text.push_str(&format!("{}\t{}\t{}\n", s.name, s.d, s.k));
    }
    sha256_hex(text.as_bytes())
}

/// Per-layer leading triplets of one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedAdapter {
    pub adapter_id: String,
    pub base_model: String,
    pub triplets: BTreeMap<String, SingularTriplet>,
    pub layout_hash: String,
}

impl ReducedAdapter {
    pub fn new(
        adapter_id: impl Into<String>,
        base_model: impl Into<String>,
        triplets: BTreeMap<String, SingularTriplet>,
    ) -> Result<Self> {
        let layout_hash = LayoutDescriptor::of_triplets(&triplets)?.hash;
        Ok(Self {
            adapter_id: adapter_id.into(),
            base_model: base_model.into(),
            triplets,
            layout_hash,
        })
    }

    pub fn layout(&self) -> Result<LayoutDescriptor> {
        LayoutDescriptor::of_triplets(&self.triplets)
    }
}

/// Flattened adapter coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub adapter_id: String,
    pub theta: Vec<f32>,
    pub layout_hash: String,
}

impl WeightVector {
    pub fn new(adapter_id: impl Into<String>, theta: Vec<f32>, layout: &LayoutDescriptor) -> Result<Self> {
        if theta.len() != layout.total_dim {
            return Err(Error::DimensionMismatch {
                expected: layout.total_dim,
                got: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("θ[{i}] is not finite")));
        }
        Ok(Self {
            adapter_id: adapter_id.into(),
            theta,
            layout_hash: layout.hash.clone(),
        })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.theta.iter().map(|&x| x as f64).collect()
    }
}

/// Reduces every selected layer of `bundle` to its leading triplet,
/// iterating on the factored form.
pub fn reduce_adapter(bundle: &AdapterBundle, layers: &LayerSelection, opts: &SvdOptions) -> Result<ReducedAdapter> {
    let mut triplets = BTreeMap::new();
    for (name, layer) in bundle.layers.iter().filter(|(n, _)| layers.matches(n)) {
        let scale = bundle.layer_scale(name).expect("layer exists");
        let triplet = FactoredOp::new(layer.down.view(), layer.up.view(), scale)
            .and_then(|op| top1_svd(&op, opts))
            .map_err(|e| Error::in_layer(name, e))?;
        triplets.insert(name.clone(), triplet);
    }
    if triplets.is_empty() {
        return Err(Error::NoMatchingLayers(bundle.adapter_id.clone()));
    }
    ReducedAdapter::new(bundle.adapter_id.clone(), bundle.base_model.clone(), triplets)
}

/// Loads and reduces manifest entries in parallel; output is sorted by
/// adapter id regardless of scheduling.
pub fn reduce_corpus(
    entries: &[ManifestEntry],
    naming: &NamingPatterns,
    layers: &LayerSelection,
    opts: &SvdOptions,
) -> Result<Vec<ReducedAdapter>> {
    let mut reduced = entries
        .par_iter()
        .map(|entry| {
            let mut bundle = load_adapter_with(&entry.path, naming)?;
            bundle.adapter_id = entry.adapter_id.clone();
            reduce_adapter(&bundle, layers, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    reduced.sort_by(|a, b| a.adapter_id.cmp(&b.adapter_id));
    Ok(reduced)
}

/// Shared layout of a corpus; every adapter must have the same layers with
/// the same shapes.
pub fn make_layout(reduced: &[ReducedAdapter]) -> Result<LayoutDescriptor> {
    let first = reduced
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot build a layout from an empty corpus".into()))?;
    let layout = first.layout()?;
    for other in &reduced[1..] {
        if other.layout_hash == layout.hash {
            continue;
        }
        let a: BTreeSet<String> = first.triplets.keys().cloned().collect();
        let b: BTreeSet<String> = other.triplets.keys().cloned().collect();
        let mut only_first: Vec<String> = a.difference(&b).cloned().collect();
        let mut only_other: Vec<String> = b.difference(&a).cloned().collect();
        for name in a.intersection(&b) {
            let (x, y) = (&first.triplets[name], &other.triplets[name]);
            if (x.u.len(), x.v.len()) != (y.u.len(), y.v.len()) {
                only_first.push(format!("{name}[{}x{}]", x.u.len(), x.v.len()));
                only_other.push(format!("{name}[{}x{}]", y.u.len(), y.v.len()));
            }
        }
        return Err(Error::HeterogeneousCorpus {
            first: first.adapter_id.clone(),
            other: other.adapter_id.clone(),
            only_first,
            only_other,
        });
    }
    Ok(layout)
}

fn check_hash(expected: &LayoutDescriptor, found: &str) -> Result<()> {
    if expected.hash != found {
        return Err(Error::LayoutMismatch {
            expected: expected.hash.clone(),
            found: found.to_string(),
        });
    }
    Ok(())
}

pub fn flatten(reduced: &ReducedAdapter, layout: &LayoutDescriptor) -> Result<WeightVector> {
    check_hash(layout, &reduced.layout_hash)?;
    let mut theta = Vec::with_capacity(layout.total_dim);
    for seg in &layout.segments {
        let t = &reduced.triplets[&seg.name];
        let root = t.sigma.max(0.0).sqrt();
        theta.extend(t.u.iter().map(|x| (root * x) as f32));
        theta.extend(t.v.iter().map(|x| (root * x) as f32));
    }
    WeightVector::new(reduced.adapter_id.clone(), theta, layout)
}

/// Norm below which a flattened half is treated as zero.
const ZERO_HALF: f64 = 1e-12;

pub fn unflatten(theta: &WeightVector, layout: &LayoutDescriptor) -> Result<ReducedAdapter> {
    check_hash(layout, &theta.layout_hash)?;
    if theta.theta.len() != layout.total_dim {
        return Err(Error::DimensionMismatch {
            expected: layout.total_dim,
            got: theta.theta.len(),
        });
    }
    let mut triplets = BTreeMap::new();
    let mut offset = 0;
    for seg in &layout.segments {
        let a: Vec<f64> = theta.theta[offset..offset + seg.d].iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = theta.theta[offset + seg.d..offset + seg.d + seg.k]
            .iter()
            .map(|&x| x as f64)
            .collect();
        offset += seg.d + seg.k;
        let (na, nb) = (norm(&a), norm(&b));
        let mut triplet = if na < ZERO_HALF || nb < ZERO_HALF {
            let mut u = vec![0.0; seg.d];
            let mut v = vec![0.0; seg.k];
            u[0] = 1.0;
            v[0] = 1.0;
            SingularTriplet { sigma: 0.0, u, v }
        } else {
            SingularTriplet {
                sigma: na * nb,
                u: a.iter().map(|x| x / na).collect(),
                v: b.iter().map(|x| x / nb).collect(),
            }
        };
        triplet.normalize_sign();
        triplets.insert(seg.name.clone(), triplet);
    }
    let mut reduced = ReducedAdapter::new(theta.adapter_id.clone(), "unknown", triplets)?;
    reduced.layout_hash = layout.hash.clone();
    Ok(reduced)
}

/// Rank-1 adapter with `B' = √σ·u`, `A' = √σ·vᵀ` and `alpha = r = 1`.
pub fn export_rank1(reduced: &ReducedAdapter) -> Result<AdapterBundle> {
    let mut layers = BTreeMap::new();
    for (name, t) in &reduced.triplets {
        let root = t.sigma.max(0.0).sqrt();
        let up = Array2::from_shape_fn((t.u.len(), 1), |(i, _)| (root * t.u[i]) as f32);
        let down = Array2::from_shape_fn((1, t.v.len()), |(_, j)| (root * t.v[j]) as f32);
        layers.insert(name.clone(), LoraLayer::new(down, up));
    }
    let mut bundle = AdapterBundle::from_layers(reduced.adapter_id.clone(), layers, 1.0, reduced.base_model.clone())?;
    bundle.alpha_source = AlphaSource::Metadata;
    bundle.metadata.insert("alpha".into(), "1".into());
    bundle.metadata.insert("adapter_id".into(), reduced.adapter_id.clone());
    bundle.metadata.insert("base_model".into(), reduced.base_model.clone());
    bundle
        .metadata
        .insert("w2w_layout_hash".into(), reduced.layout_hash.clone());
    Ok(bundle)
}

const LAYOUT_FILE: &str = "layout.json";
const VECTORS_FILE: &str = "vectors.st";
const VECTORS_TENSOR: &str = "theta";

/// A reduced corpus on disk: `layout.json` plus `vectors.st` holding an
/// N × D float32 matrix whose row ids are stored in the archive metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCorpus {
    pub layout: LayoutDescriptor,
    pub vectors: Vec<WeightVector>,
}

impl ReducedCorpus {
    pub fn from_reduced(reduced: &[ReducedAdapter]) -> Result<Self> {
        let layout = make_layout(reduced)?;
        let vectors = reduced
            .iter()
            .map(|r| flatten(r, &layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layout, vectors })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json_atomic(&dir.join(LAYOUT_FILE), &self.layout)?;
        let ids: Vec<&str> = self.vectors.iter().map(|v| v.adapter_id.as_str()).collect();
        let mut data = Vec::with_capacity(self.vectors.len() * self.layout.total_dim);
        for v in &self.vectors {
            check_hash(&self.layout, &v.layout_hash)?;
            data.extend_from_slice(&v.theta);
        }
        let mut builder = ArchiveBuilder::new();
        builder.insert_metadata("ids", serde_json::to_string(&ids)?);
        builder.insert_metadata("layout_hash", self.layout.hash.clone());
        builder.add_f32(VECTORS_TENSOR, vec![self.vectors.len(), self.layout.total_dim], &data)?;
        builder.build().write(dir.join(VECTORS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let layout = LayoutDescriptor::read(&dir.join(LAYOUT_FILE))?;
        let archive = TensorArchive::read(dir.join(VECTORS_FILE))?;
        let found = archive.metadata().get("layout_hash").cloned().unwrap_or_default();
        check_hash(&layout, &found)?;
        let ids: Vec<String> = serde_json::from_str(
            archive
                .metadata()
                .get("ids")
                .ok_or_else(|| Error::InvalidInput("vectors archive lacks `ids` metadata".into()))?,
        )?;
        let data = archive.tensor_f32(VECTORS_TENSOR)?;
        let dim = layout.total_dim;
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        let vectors = ids
            .into_iter()
            .zip(data.chunks_exact(dim.max(1)))
            .map(|(id, row)| WeightVector::new(id, row.to_vec(), &layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layout, vectors })
    }

    pub fn get(&self, adapter_id: &str) -> Option<&WeightVector> {
        self.vectors.iter().find(|v| v.adapter_id == adapter_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn entry(id: &str, rank: usize, base: &str) -> ManifestEntry {
        ManifestEntry {
            adapter_id: id.into(),
            path: PathBuf::from(format!("{id}.safetensors")),
            rank,
            base_model: base.into(),
            tags: vec![],
        }
    }

    fn triplet(sigma: f64, u: Vec<f64>, v: Vec<f64>) -> SingularTriplet {
        SingularTriplet { sigma, u, v }
    }

    #[test]
    fn filter_by_rank_and_base() {
        let m = vec![entry("a", 8, "sd15"), entry("b", 16, "sdxl"), entry("c", 16, "sd15")];
        let f = CorpusFilter {
            rank: Some(16),
            ..Default::default()
        };
        assert_eq!(filter_corpus(&m, &f).unwrap().len(), 2);
        let f = CorpusFilter {
            base_model: Some("sdxl".into()),
            ..Default::default()
        };
        let kept = filter_corpus(&m, &f).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].adapter_id, "b");
        let f = CorpusFilter {
            rank: Some(4),
            ..Default::default()
        };
        assert!(matches!(filter_corpus(&m, &f), Err(Error::EmptySelection)));
    }

    #[test]
    fn layer_patterns() {
        let sel = LayerSelection::parse_list("attn+to_v").unwrap();
        assert!(sel.matches("lora_unet_mid_attn1_to_v"));
        assert!(!sel.matches("lora_unet_mid_attn1_to_k"));
        assert!(LayerSelection::all().matches("anything"));
        assert!(LayerSelection::ff_attn_v().matches("lora_unet_up_ff_net_0_proj"));
        assert!(!LayerSelection::unet().matches("lora_te_text_model_mlp_fc1"));
        assert_eq!(LayerSelection::ff_attn_v().to_string(), "unet+ff,unet+attn+to_v");
    }

    #[test]
    fn planted_rank1_reduction() {
        let mut layers = BTreeMap::new();
        layers.insert(
            "L".to_string(),
            LoraLayer::new(array![[1.0f32, 0.0]], array![[2.0f32], [0.0]]),
        );
        let bundle = AdapterBundle::from_layers("p", layers, 1.0, "sd").unwrap();
        let r = reduce_adapter(&bundle, &LayerSelection::all(), &SvdOptions::default()).unwrap();
        let t = &r.triplets["L"];
        assert!((t.sigma - 2.0).abs() < 1e-12);
        assert!((t.u[0] - 1.0).abs() < 1e-12 && (t.v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_adapter_is_degenerate() {
        let mut layers = BTreeMap::new();
        layers.insert(
            "L".to_string(),
            LoraLayer::new(Array2::zeros((1, 2)), Array2::zeros((2, 1))),
        );
        let bundle = AdapterBundle::from_layers("z", layers, 1.0, "sd").unwrap();
        let err = reduce_adapter(&bundle, &LayerSelection::all(), &SvdOptions::default()).unwrap_err();
        assert_eq!(err.kind(), "DegenerateMatrix");
        assert!(err.to_string().contains("`L`"));
    }

    #[test]
    fn no_matching_layers() {
        let mut layers = BTreeMap::new();
        layers.insert(
            "ff".to_string(),
            LoraLayer::new(Array2::ones((1, 2)), Array2::ones((2, 1))),
        );
        let bundle = AdapterBundle::from_layers("n", layers, 1.0, "sd").unwrap();
        assert!(matches!(
            reduce_adapter(&bundle, &LayerSelection::attn_v(), &SvdOptions::default()),
            Err(Error::NoMatchingLayers(_))
        ));
    }

    #[test]
    fn flatten_by_hand() {
        let mut t = BTreeMap::new();
        t.insert("L".to_string(), triplet(4.0, vec![1.0, 0.0], vec![0.0, 1.0]));
        let r = ReducedAdapter::new("h", "sd", t).unwrap();
        let layout = make_layout(std::slice::from_ref(&r)).unwrap();
        let w = flatten(&r, &layout).unwrap();
        assert_eq!(w.theta, vec![2.0, 0.0, 0.0, 2.0]);
        let back = unflatten(&w, &layout).unwrap();
        assert_eq!(back.triplets["L"], triplet(4.0, vec![1.0, 0.0], vec![0.0, 1.0]));
    }

    #[test]
    fn zero_sigma_segment() {
        let mut t = BTreeMap::new();
        t.insert("L".to_string(), triplet(0.0, vec![1.0, 0.0], vec![1.0, 0.0, 0.0]));
        let r = ReducedAdapter::new("z", "sd", t).unwrap();
        let layout = r.layout().unwrap();
        assert!(flatten(&r, &layout).unwrap().theta.iter().all(|&x| x == 0.0));
        let zero = WeightVector::new("z", vec![0.0; 5], &layout).unwrap();
        let back = unflatten(&zero, &layout).unwrap();
        assert_eq!(back.triplets["L"].sigma, 0.0);
        assert_eq!(back.triplets["L"].u, vec![1.0, 0.0]);
    }

    #[test]
    fn heterogeneous_corpus() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), triplet(1.0, vec![1.0], vec![1.0]));
        a.insert("y".to_string(), triplet(1.0, vec![1.0], vec![1.0]));
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), triplet(1.0, vec![1.0], vec![1.0]));
        b.insert("z".to_string(), triplet(1.0, vec![1.0], vec![1.0]));
        let ra = ReducedAdapter::new("a", "sd", a).unwrap();
        let rb = ReducedAdapter::new("b", "sd", b).unwrap();
        match make_layout(&[ra, rb]) {
            Err(Error::HeterogeneousCorpus {
                only_first, only_other, ..
            }) => {
                assert_eq!(only_first, vec!["y"]);
                assert_eq!(only_other, vec!["z"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layout_hash_is_recomputable() {
        let layout = LayoutDescriptor::new(vec![
            LayoutSegment {
                name: "b".into(),
                d: 3,
                k: 2,
            },
            LayoutSegment {
                name: "a".into(),
                d: 1,
                k: 4,
            },
        ])
        .unwrap();
        assert_eq!(layout.layer_names(), vec!["a", "b"]);
        assert_eq!(layout.total_dim, 10);
        assert_eq!(layout.hash, sha256_hex(b"a\t1\t4\nb\t3\t2\n"));
        assert_eq!(layout.offsets(), vec![0, 5]);
    }

    #[test]
    fn layout_mismatch_refused() {
        let mut t = BTreeMap::new();
        t.insert("L".to_string(), triplet(1.0, vec![1.0], vec![1.0]));
        let r = ReducedAdapter::new("a", "sd", t).unwrap();
        let other = LayoutDescriptor::new(vec![LayoutSegment {
            name: "M".into(),
            d: 1,
            k: 1,
        }])
        .unwrap();
        assert!(matches!(flatten(&r, &other), Err(Error::LayoutMismatch { .. })));
    }
}

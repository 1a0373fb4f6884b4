//! LoRA adapter files: pairing down/up factors, loading, saving and
//! composing the dense update `ΔW = (alpha / r) · B · A`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveBuilder, Dtype, TensorArchive};
use crate::error::{Error, Result};

/// Tensor-name suffixes that identify the two factors of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingPatterns {
    /// Suffix of the down projection `A` (r × k).
    pub down_suffix: String,
    /// Suffix of the up projection `B` (d × r).
    pub up_suffix: String,
    /// Suffix of optional per-layer scalar alpha tensors.
    pub alpha_suffix: Option<String>,
}

impl Default for NamingPatterns {
    fn default() -> Self {
        Self {
            down_suffix: ".lora_down.weight".into(),
            up_suffix: ".lora_up.weight".into(),
            alpha_suffix: Some(".alpha".into()),
        }
    }
}

/// Where a bundle's `network_alpha` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    Metadata,
    LayerTensors,
    /// No alpha anywhere; defaulted to the rank (scale 1).
    DefaultRank,
}

/// One adapted layer. Factor shapes are kept as stored so conv-style
/// `[r, k, 1, 1]` tensors round-trip unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `A`, r × k.
    pub down: Array2<f32>,
    /// `B`, d × r.
    pub up: Array2<f32>,
    pub alpha: Option<f32>,
    pub down_shape: Vec<usize>,
    pub up_shape: Vec<usize>,
}

impl LoraLayer {
    pub fn new(down: Array2<f32>, up: Array2<f32>) -> Self {
        let down_shape = down.shape().to_vec();
        let up_shape = up.shape().to_vec();
        Self {
            down,
            up,
            alpha: None,
            down_shape,
            up_shape,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    /// Output dimension d.
    pub fn out_dim(&self) -> usize {
        self.up.nrows()
    }

    /// Input dimension k.
    pub fn in_dim(&self) -> usize {
        self.down.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub adapter_id: String,
    pub layers: BTreeMap<String, LoraLayer>,
    pub network_alpha: f32,
    pub alpha_source: AlphaSource,
    pub rank: usize,
    pub base_model: String,
    /// Archive metadata, preserved verbatim across load/save.
    pub metadata: BTreeMap<String, String>,
}

impl AdapterBundle {
    /// Builds a bundle from in-memory layers, checking the rank invariants.
    pub fn from_layers(
        adapter_id: impl Into<String>,
        layers: BTreeMap<String, LoraLayer>,
        network_alpha: f32,
        base_model: impl Into<String>,
    ) -> Result<Self> {
        let rank = check_layers(&layers)?;
        if !(network_alpha.is_finite() && network_alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "network alpha {network_alpha} must be positive"
            )));
        }
        Ok(Self {
            adapter_id: adapter_id.into(),
            layers,
            network_alpha,
            alpha_source: AlphaSource::Metadata,
            rank,
            base_model: base_model.into(),
            metadata: BTreeMap::new(),
        })
    }

    /// Effective scale `alpha / r` of a layer.
    pub fn layer_scale(&self, name: &str) -> Option<f64> {
        self.layers
            .get(name)
            .map(|l| l.alpha.unwrap_or(self.network_alpha) as f64 / self.rank as f64)
    }

    /// Dense `ΔW` of one layer.
    pub fn delta(&self, name: &str) -> Result<Array2<f64>> {
        let layer = self
            .layers
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no layer `{name}`")))?;
        let alpha = layer.alpha.unwrap_or(self.network_alpha) as f64;
        compose_delta(layer.down.view(), layer.up.view(), alpha, self.rank)
    }
}

fn check_layers(layers: &BTreeMap<String, LoraLayer>) -> Result<usize> {
    let mut rank = None;
    for (name, layer) in layers {
        let r = layer.down.nrows();
        if r == 0 || layer.down.ncols() == 0 || layer.up.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!("layer `{name}` has an empty dimension")));
        }
        if layer.up.ncols() != r {
            return Err(Error::RankMismatch {
                layer: name.clone(),
                expected: r,
                found: layer.up.ncols(),
            });
        }
        match rank {
            None => rank = Some(r),
            Some(expected) if expected != r => {
                return Err(Error::RankMismatch {
                    layer: name.clone(),
                    expected,
                    found: r,
                })
            }
            _ => {}
        }
    }
    rank.ok_or(Error::EmptyBundle)
}

/// `(alpha / rank) · B · A` with f64 accumulation.
pub fn compose_delta(down: ArrayView2<f32>, up: ArrayView2<f32>, alpha: f64, rank: usize) -> Result<Array2<f64>> {
    if up.ncols() != down.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "B is {}x{} but A is {}x{}",
            up.nrows(),
            up.ncols(),
            down.nrows(),
            down.ncols()
        )));
    }
    if rank == 0 {
        return Err(Error::ShapeMismatch("rank must be positive".into()));
    }
    let scale = alpha / rank as f64;
    let a = down.mapv(f64::from);
    let b = up.mapv(f64::from);
    Ok(b.dot(&a) * scale)
}

fn as_matrix(name: &str, shape: &[usize], data: Vec<f32>, factor_is_down: bool) -> Result<Array2<f32>> {
    // down: [r, k, ...] → r × (k·...); up: [d, r, 1, 1] → d × r
    let (rows, cols) = match shape {
        [r, rest @ ..] if factor_is_down && !rest.is_empty() => (*r, rest.iter().product()),
        [d, r, rest @ ..] if !factor_is_down && rest.iter().all(|&x| x == 1) => (*d, *r),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has unsupported shape {shape:?}"
            )))
        }
    };
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ShapeMismatch(format!("tensor `{name}`: {e}")))
}

fn read_factor(archive: &TensorArchive, name: &str, is_down: bool) -> Result<(Array2<f32>, Vec<usize>)> {
    let info = archive.info(name).expect("name comes from the archive");
    if !matches!(info.dtype, Dtype::F32 | Dtype::F16) {
        return Err(Error::DtypeUnsupported {
            tensor: name.to_string(),
            dtype: info.dtype.to_string(),
        });
    }
    let shape = info.shape.clone();
    let data = archive.tensor_f32(name)?;
    Ok((as_matrix(name, &shape, data, is_down)?, shape))
}

/// Extracts an adapter from a parsed archive.
pub fn bundle_from_archive(
    archive: &TensorArchive,
    adapter_id: &str,
    patterns: &NamingPatterns,
) -> Result<AdapterBundle> {
    let mut downs = BTreeMap::new();
    let mut ups = BTreeMap::new();
    let mut alphas = BTreeMap::new();
    for name in archive.tensors().keys() {
        if let Some(prefix) = name.strip_suffix(&patterns.down_suffix) {
            downs.insert(prefix.to_string(), name.clone());
        } else if let Some(prefix) = name.strip_suffix(&patterns.up_suffix) {
            ups.insert(prefix.to_string(), name.clone());
        } else if let Some(prefix) = patterns.alpha_suffix.as_deref().and_then(|s| name.strip_suffix(s)) {
            alphas.insert(prefix.to_string(), name.clone());
        } else {
            log::warn!("{adapter_id}: ignoring tensor `{name}` (matches no naming pattern)");
        }
    }
    for (prefix, name) in &downs {
        if !ups.contains_key(prefix) {
            return Err(Error::UnpairedTensor(name.clone()));
        }
    }
    for (prefix, name) in &ups {
        if !downs.contains_key(prefix) {
            return Err(Error::UnpairedTensor(name.clone()));
        }
    }
    for (prefix, name) in &alphas {
        if !downs.contains_key(prefix) {
            return Err(Error::UnpairedTensor(name.clone()));
        }
    }

    let mut layers = BTreeMap::new();
    for (prefix, down_name) in &downs {
        let (down, down_shape) = read_factor(archive, down_name, true)?;
        let (up, up_shape) = read_factor(archive, &ups[prefix], false)?;
        let alpha = match alphas.get(prefix) {
            Some(alpha_name) => {
                let values = archive.tensor_f32(alpha_name)?;
                match values.as_slice() {
                    [a] => Some(*a),
                    _ => return Err(Error::ShapeMismatch(format!("`{alpha_name}` is not a scalar"))),
                }
            }
            None => None,
        };
        layers.insert(
            prefix.clone(),
            LoraLayer {
                down,
                up,
                alpha,
                down_shape,
                up_shape,
            },
        );
    }
    let rank = check_layers(&layers)?;

    let metadata = archive.metadata().clone();
    let (network_alpha, alpha_source) = match metadata.get("alpha").and_then(|s| s.trim().parse::<f32>().ok()) {
        Some(a) if a > 0.0 && a.is_finite() => (a, AlphaSource::Metadata),
        _ => match layers.values().find_map(|l| l.alpha) {
            Some(a) => (a, AlphaSource::LayerTensors),
            None => (rank as f32, AlphaSource::DefaultRank),
        },
    };
    let base_model = metadata
        .get("base_model")
        .or_else(|| metadata.get("ss_base_model_version"))
        .cloned()
        .unwrap_or_else(|| "unknown".into());
    let adapter_id = metadata
        .get("adapter_id")
        .cloned()
        .unwrap_or_else(|| adapter_id.to_string());
    Ok(AdapterBundle {
        adapter_id,
        layers,
        network_alpha,
        alpha_source,
        rank,
        base_model,
        metadata,
    })
}

/// Loads an adapter with the default naming patterns.
pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterBundle> {
    load_adapter_with(path, &NamingPatterns::default())
}

pub fn load_adapter_with(path: impl AsRef<Path>, patterns: &NamingPatterns) -> Result<AdapterBundle> {
    let path = path.as_ref();
    let archive = TensorArchive::read(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    bundle_from_archive(&archive, &stem, patterns)
}

/// Converts a bundle to an archive (all factors as little-endian f32).
pub fn bundle_to_archive(bundle: &AdapterBundle, patterns: &NamingPatterns) -> Result<TensorArchive> {
    if bundle.layers.is_empty() {
        return Err(Error::EmptyBundle);
    }
    check_layers(&bundle.layers)?;
    let mut builder = ArchiveBuilder::new().metadata(bundle.metadata.clone());
    for (name, layer) in &bundle.layers {
        let down: Vec<f32> = layer.down.iter().copied().collect();
        let up: Vec<f32> = layer.up.iter().copied().collect();
        builder.add_f32(
            format!("{name}{}", patterns.down_suffix),
            layer.down_shape.clone(),
            &down,
        )?;
        builder.add_f32(format!("{name}{}", patterns.up_suffix), layer.up_shape.clone(), &up)?;
        if let (Some(alpha), Some(suffix)) = (layer.alpha, patterns.alpha_suffix.as_deref()) {
            builder.add_f32(format!("{name}{suffix}"), vec![], &[alpha])?;
        }
    }
    Ok(builder.build())
}

pub fn save_adapter(bundle: &AdapterBundle, path: impl AsRef<Path>) -> Result<()> {
    save_adapter_with(bundle, path, &NamingPatterns::default())
}

pub fn save_adapter_with(bundle: &AdapterBundle, path: impl AsRef<Path>, patterns: &NamingPatterns) -> Result<()> {
    bundle_to_archive(bundle, patterns)?.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn layer(r: usize, d: usize, k: usize, fill: f32) -> LoraLayer {
        LoraLayer::new(Array2::from_elem((r, k), fill), Array2::from_elem((d, r), fill))
    }

    #[test]
    fn shape_bookkeeping() {
        let mut b = ArchiveBuilder::new();
        b.add_f32("L.lora_down.weight", vec![4, 8], &[0.5; 32]).unwrap();
        b.add_f32("L.lora_up.weight", vec![16, 4], &[0.25; 64]).unwrap();
        let bundle = bundle_from_archive(&b.build(), "x", &NamingPatterns::default()).unwrap();
        assert_eq!(bundle.rank, 4);
        assert_eq!(bundle.layers.len(), 1);
        let l = &bundle.layers["L"];
        assert_eq!((l.out_dim(), l.in_dim()), (16, 8));
        assert_eq!(bundle.alpha_source, AlphaSource::DefaultRank);
        assert_eq!(bundle.network_alpha, 4.0);
    }

    #[test]
    fn unpaired_down() {
        let mut b = ArchiveBuilder::new();
        b.add_f32("L.lora_down.weight", vec![4, 8], &[0.0; 32]).unwrap();
        let err = bundle_from_archive(&b.build(), "x", &NamingPatterns::default()).unwrap_err();
        assert!(matches!(err, Error::UnpairedTensor(n) if n == "L.lora_down.weight"));
    }

    #[test]
    fn rank_disagreement() {
        let mut layers = BTreeMap::new();
        layers.insert("a".to_string(), layer(2, 3, 3, 1.0));
        layers.insert("b".to_string(), layer(4, 3, 3, 1.0));
        assert!(matches!(
            AdapterBundle::from_layers("x", layers, 1.0, "sd"),
            Err(Error::RankMismatch { .. })
        ));
    }

    #[test]
    fn unsupported_dtype() {
        let mut b = ArchiveBuilder::new();
        b.add_raw("L.lora_down.weight", Dtype::BF16, vec![1, 1], vec![0, 0])
            .unwrap();
        b.add_f32("L.lora_up.weight", vec![1, 1], &[1.0]).unwrap();
        assert!(matches!(
            bundle_from_archive(&b.build(), "x", &NamingPatterns::default()),
            Err(Error::DtypeUnsupported { .. })
        ));
    }

    #[test]
    fn metadata_alpha_and_base_model() {
        let mut b = ArchiveBuilder::new();
        b.insert_metadata("alpha", "8");
        b.insert_metadata("base_model", "sdxl");
        b.add_f32("L.lora_down.weight", vec![2, 2], &[1.0; 4]).unwrap();
        b.add_f32("L.lora_up.weight", vec![2, 2], &[1.0; 4]).unwrap();
        let bundle = bundle_from_archive(&b.build(), "x", &NamingPatterns::default()).unwrap();
        assert_eq!(bundle.network_alpha, 8.0);
        assert_eq!(bundle.base_model, "sdxl");
        assert_eq!(bundle.layer_scale("L"), Some(4.0));
    }

    #[test]
    fn conv_shapes_round_trip() {
        let mut b = ArchiveBuilder::new();
        b.add_f32("c.lora_down.weight", vec![2, 3, 1, 1], &[1.0; 6]).unwrap();
        b.add_f32("c.lora_up.weight", vec![5, 2, 1, 1], &[1.0; 10]).unwrap();
        b.add_f32("c.alpha", vec![], &[1.0]).unwrap();
        let archive = b.build();
        let bundle = bundle_from_archive(&archive, "x", &NamingPatterns::default()).unwrap();
        assert_eq!(bundle.layers["c"].down.dim(), (2, 3));
        assert_eq!(bundle.alpha_source, AlphaSource::LayerTensors);
        let again = bundle_to_archive(&bundle, &NamingPatterns::default()).unwrap();
        assert_eq!(again.to_bytes(), archive.to_bytes());
    }

    #[test]
    fn compose_identity_and_zero() {
        let i2 = Array2::<f32>::eye(2);
        let d = compose_delta(i2.view(), i2.view(), 2.0, 2).unwrap();
        assert_eq!(d, Array2::<f64>::eye(2));
        let z = Array2::<f32>::zeros((2, 2));
        assert_eq!(
            compose_delta(i2.view(), z.view(), 2.0, 2).unwrap(),
            Array2::<f64>::zeros((2, 2))
        );
    }

    #[test]
    fn compose_shape_mismatch() {
        let a = array![[1.0f32, 2.0]];
        let b = array![[1.0f32, 0.0]];
        assert!(matches!(
            compose_delta(a.view(), b.view(), 1.0, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn empty_bundle_refused_on_save() {
        let bundle = AdapterBundle {
            adapter_id: "e".into(),
            layers: BTreeMap::new(),
            network_alpha: 1.0,
            alpha_source: AlphaSource::DefaultRank,
            rank: 1,
            base_model: "x".into(),
            metadata: BTreeMap::new(),
        };
        assert!(matches!(
            bundle_to_archive(&bundle, &NamingPatterns::default()),
            Err(Error::EmptyBundle)
        ));
    }
}

//! Synthetic corpora with planted structure and the evaluation reports
//! that check how well the pipeline recovers it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::direction::EditDirection;
use crate::error::{Error, Result};
use crate::linalg::{canonical_sign, dot, norm, principal_angles};
use crate::preference::{dot as dot32, normalize, EmbeddingTable, Label, LabelRule, PreferenceLabelSet};
use crate::reduction::{LayoutDescriptor, LayoutSegment, WeightVector};
use crate::space::W2WSpace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLayer {
    pub name: String,
    pub d: usize,
    pub k: usize,
}

/// How planted coordinates are embedded in θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Planted basis spans arbitrary directions of the full θ space.
    #[default]
    Dense,
    /// Each layer segment is a positive multiple of a fixed canonical
    /// `(u; v)` pair, so θ survives unflatten → export → reduce → flatten.
    /// Planted coordinates and noise live in the per-layer amplitudes.
    LayerScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub layers: Vec<SyntheticLayer>,
    pub n: usize,
    pub m_true: usize,
    /// Standard deviation of the planted coefficients.
    pub subspace_scale: f64,
    /// Class means sit at `±s·g/2`.
    pub separation: f64,
    /// Isotropic noise level η.
    pub noise: f64,
    #[serde(default)]
    pub geometry: Geometry,
}

/// `count` layers of shape d × k whose names match every layer preset.
pub fn default_layers(count: usize, d: usize, k: usize) -> Vec<SyntheticLayer> {
    (0..count)
        .map(|i| SyntheticLayer {
            name: if i % 2 == 0 {
                format!("unet.block_{i:02}.attn.to_v")
            } else {
                format!("unet.block_{i:02}.ff")
            },
            d,
            k,
        })
        .collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: default_layers(4, 4, 4),
            n: 200,
            m_true: 5,
            subspace_scale: 1.0,
            separation: 2.0,
            noise: 0.1,
            geometry: Geometry::Dense,
        }
    }
}

impl SyntheticSpec {
    pub fn layout(&self) -> Result<LayoutDescriptor> {
        LayoutDescriptor::new(
            self.layers
                .iter()
                .map(|l| LayoutSegment {
                    name: l.name.clone(),
                    d: l.d,
                    k: l.k,
                })
                .collect(),
        )
    }

    /// Number of free coordinates the planted subspace can use.
    fn ambient(&self, layout: &LayoutDescriptor) -> usize {
        match self.geometry {
            Geometry::Dense => layout.total_dim,
            Geometry::LayerScale => layout.segments.len(),
        }
    }

    pub fn validate(&self) -> Result<LayoutDescriptor> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if let Some(l) = self.layers.iter().find(|l| l.d == 0 || l.k == 0) {
            return bad(format!("layer `{}` has a zero dimension", l.name));
        }
        let layout = self.layout().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if self.n < 2 {
            return bad(format!("N = {} is below 2", self.n));
        }
        if self.m_true == 0 || self.m_true > self.n - 1 {
            return bad(format!("m_true = {} must lie in 1..={}", self.m_true, self.n - 1));
        }
        let ambient = self.ambient(&layout);
        if self.m_true > ambient {
            return bad(format!(
                "m_true = {} exceeds the {ambient} available coordinates",
                self.m_true
            ));
        }
        if !(self.subspace_scale.is_finite() && self.subspace_scale > 0.0) {
            return bad(format!("subspace scale {} must be positive", self.subspace_scale));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad(format!("separation {} must be non-negative", self.separation));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(layout)
    }
}

/// Planted quantities, kept for oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `μ*`, length D.
    pub mean: Vec<f64>,
    /// Orthonormal rows `B*`, m_true × D.
    pub basis: Vec<Vec<f64>>,
    /// Unit planted directions in coefficient space, one per user.
    pub directions: Vec<Vec<f64>>,
    pub coefficients: BTreeMap<String, Vec<f64>>,
}

impl GroundTruth {
    pub fn basis_array(&self) -> Array2<f64> {
        let d = self.mean.len();
        Array2::from_shape_fn((self.basis.len(), d), |(i, j)| self.basis[i][j])
    }

    /// `B*ᵀ g` for direction `i`.
    pub fn direction_full(&self, i: usize) -> Vec<f64> {
        self.basis_array()
            .t()
            .dot(&ArrayView1::from(&self.directions[i]))
            .to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub layout: LayoutDescriptor,
    pub vectors: Vec<WeightVector>,
    /// One label set per planted direction.
    pub labels: Vec<PreferenceLabelSet>,
    pub truth: GroundTruth,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let l = norm(&v);
        if l > 1e-8 {
            return v.iter().map(|x| x / l).collect();
        }
    }
}

/// `rows` orthonormal Gaussian rows in R^n (modified Gram-Schmidt).
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = normal_vec(rng, n);
        for q in &out {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let l = norm(&v);
        if l > 1e-6 {
            out.push(v.iter().map(|x| x / l).collect());
        }
    }
    out
}

fn item_id(i: usize) -> String {
    format!("syn-{i:05}")
}

/// Per-layer unit vectors `(u; v)/√2` with a canonically signed `u`, as
/// rows of an L × D matrix.
fn layer_frames(rng: &mut ChaCha8Rng, layout: &LayoutDescriptor) -> Vec<Vec<f64>> {
    let offsets = layout.offsets();
    layout
        .segments
        .iter()
        .zip(offsets)
        .map(|(seg, off)| {
            let mut u = unit_vec(rng, seg.d);
            canonical_sign(&mut u);
            let v = unit_vec(rng, seg.k);
            let mut row = vec![0.0; layout.total_dim];
            for (i, x) in u.iter().chain(&v).enumerate() {
                row[off + i] = x / std::f64::consts::SQRT_2;
            }
            row
        })
        .collect()
}

fn label_set(user: &str, seed: u64, coeffs: &[Vec<f64>], g: &[f64]) -> PreferenceLabelSet {
    let labels = coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let l = if dot(c, g) >= 0.0 {
                Label::Positive
            } else {
                Label::Negative
            };
            (item_id(i), l)
        })
        .collect();
    PreferenceLabelSet {
        user_id: user.to_string(),
        rule: LabelRule::Planted { seed },
        labels,
        scores: BTreeMap::new(),
    }
}

fn to_vectors(thetas: Vec<Vec<f64>>, layout: &LayoutDescriptor) -> Result<Vec<WeightVector>> {
    thetas
        .into_iter()
        .enumerate()
        .map(|(i, t)| WeightVector::new(item_id(i), t.into_iter().map(|x| x as f32).collect(), layout))
        .collect()
}

/// Draws `θ_i = μ* + B*ᵀc_i + η·ε_i` with `c_i = z_i + y_i·s·g/2`,
/// `z_i ~ N(0, scale²·I)` and `y_i = sign⟨z_i, g⟩`.
pub fn gen_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let layout = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ambient = spec.ambient(&layout);
    let dim = layout.total_dim;

    let frames = match spec.geometry {
        Geometry::Dense => None,
        Geometry::LayerScale => Some(layer_frames(&mut rng, &layout)),
    };
    let basis_small = orthonormal_rows(&mut rng, spec.m_true, ambient);
    let g = unit_vec(&mut rng, spec.m_true);
    let mean_small: Vec<f64> = match spec.geometry {
        Geometry::Dense => normal_vec(&mut rng, ambient),
        Geometry::LayerScale => vec![0.0; ambient],
    };

    let mut coeffs = Vec::with_capacity(spec.n);
    let mut points = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z: Vec<f64> = normal_vec(&mut rng, spec.m_true)
            .into_iter()
            .map(|x| x * spec.subspace_scale)
            .collect();
        let y = if dot(&z, &g) >= 0.0 { 1.0 } else { -1.0 };
        let c: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(zi, gi)| zi + y * spec.separation * gi / 2.0)
            .collect();
        let eps = normal_vec(&mut rng, ambient);
        let mut p = mean_small.clone();
        for (row, ci) in basis_small.iter().zip(&c) {
            p.iter_mut().zip(row).for_each(|(a, b)| *a += ci * b);
        }
        p.iter_mut().zip(&eps).for_each(|(a, e)| *a += spec.noise * e);
        coeffs.push(c);
        points.push(p);
    }

    let (mean, basis, thetas) = match &frames {
        None => (mean_small, basis_small, points),
        Some(frames) => {
            // shift amplitudes so every layer stays strictly positive
            let lowest = points.iter().flatten().fold(0.0f64, |m, &x| m.min(x));
            let offset = 1.0 - lowest;
            let lift = |small: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; dim];
                for (row, a) in frames.iter().zip(small) {
                    out.iter_mut().zip(row).for_each(|(o, r)| *o += a * r);
                }
                out
            };
            let mean = lift(&vec![offset; ambient]);
            let basis = basis_small.iter().map(|b| lift(b)).collect();
            let thetas = points
                .iter()
                .map(|p| lift(&p.iter().map(|x| x + offset).collect::<Vec<_>>()))
                .collect();
            (mean, basis, thetas)
        }
    };

    let labels = vec![label_set("planted", spec.seed, &coeffs, &g)];
    Ok(SyntheticCorpus {
        vectors: to_vectors(thetas, &layout)?,
        layout,
        labels,
        truth: GroundTruth {
            mean,
            basis,
            directions: vec![g],
            coefficients: coeffs.into_iter().enumerate().map(|(i, c)| (item_id(i), c)).collect(),
        },
    })
}

/// Corpus for several users whose planted directions are distinct
/// coordinate axes of θ. Every base point appears with all sign patterns
/// of the user coordinates (magnitudes `s/2 + |z|`), so the corpus is
/// symmetric under reflecting any one user's axis and user `i` is labelled
/// by the sign of coordinate `i`. Requires `m_true == users`; noise and
/// `subspace_scale` apply to `|z|`, `N` is rounded down to a multiple of
/// `2^users`.
pub fn gen_multi_user(spec: &SyntheticSpec, users: usize) -> Result<SyntheticCorpus> {
    let layout = spec.validate()?;
    if users == 0 || users > 8 || spec.m_true != users {
        return Err(Error::InvalidSpec(format!(
            "multi-user corpus needs 1..=8 users and m_true equal to the user count (got {users}, {})",
            spec.m_true
        )));
    }
    let orbit = 1usize << users;
    let bases = spec.n / orbit;
    if bases < 1 {
        return Err(Error::InvalidSpec(format!(
            "N = {} is smaller than one orbit ({orbit})",
            spec.n
        )));
    }
    let dim = layout.total_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut axes: Vec<usize> = Vec::with_capacity(users);
    while axes.len() < users {
        let a = rng.random_range(0..dim);
        if !axes.contains(&a) {
            axes.push(a);
        }
    }
    let mut coeffs = Vec::with_capacity(bases * orbit);
    for _ in 0..bases {
        let mag: Vec<f64> = (0..users)
            .map(|_| spec.separation / 2.0 + spec.subspace_scale * rng.sample::<f64, _>(StandardNormal).abs())
            .collect();
        for pattern in 0..orbit {
            coeffs.push(
                mag.iter()
                    .enumerate()
                    .map(|(i, m)| if pattern >> i & 1 == 1 { -m } else { *m })
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let basis: Vec<Vec<f64>> = axes
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; dim];
            row[a] = 1.0;
            row
        })
        .collect();
    let thetas = coeffs
        .iter()
        .map(|c| {
            let mut t = vec![0.0; dim];
            for (a, ci) in axes.iter().zip(c) {
                t[*a] = *ci;
            }
            t
        })
        .collect();
    let directions: Vec<Vec<f64>> = (0..users)
        .map(|i| (0..users).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let labels = directions
        .iter()
        .enumerate()
        .map(|(i, g)| label_set(&format!("user-{i}"), spec.seed, &coeffs, g))
        .collect();
    Ok(SyntheticCorpus {
        vectors: to_vectors(thetas, &layout)?,
        layout,
        labels,
        truth: GroundTruth {
            mean: vec![0.0; dim],
            basis,
            directions,
            coefficients: coeffs.into_iter().enumerate().map(|(i, c)| (item_id(i), c)).collect(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub m: usize,
    pub m_true: usize,
    /// Radians, ascending.
    pub principal_angles: Vec<f64>,
    pub max_angle_deg: f64,
    /// `|cos(v_full, B*ᵀg)|`, if a direction was supplied.
    pub direction_cosine: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    /// Root-mean-square of `θ − reconstruct(project(θ))` over the corpus.
    pub reconstruction_rmse: f64,
}

/// Compares a fitted space (and optionally a direction) with the planted
/// ground truth.
pub fn recovery_report(
    space: &W2WSpace,
    direction: Option<&EditDirection>,
    truth: &GroundTruth,
    corpus: &[WeightVector],
) -> Result<RecoveryReport> {
    let planted = truth.basis_array();
    if planted.ncols() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: planted.ncols(),
        });
    }
    let angles = principal_angles(planted.view(), space.basis.view())?;
    let max_angle = angles.iter().copied().fold(0.0, f64::max);
    let direction_cosine = direction.map(|d| {
        let g = truth.direction_full(0);
        (dot(&d.v_full, &g) / (norm(&d.v_full) * norm(&g))).abs()
    });
    let mut sq = 0.0;
    let mut count = 0usize;
    for theta in corpus {
        let rec = space.reconstruct_f64(&space.project(theta)?)?;
        for (&t, r) in theta.theta.iter().zip(rec.iter()) {
            sq += (t as f64 - r).powi(2);
        }
        count += theta.theta.len();
    }
    Ok(RecoveryReport {
        m: space.m(),
        m_true: truth.basis.len(),
        principal_angles: angles,
        max_angle_deg: max_angle.to_degrees(),
        direction_cosine,
        heldout_accuracy: direction.and_then(|d| d.metrics.heldout_accuracy),
        train_accuracy: direction.map(|d| d.metrics.train_accuracy),
        reconstruction_rmse: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

impl RecoveryReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("m", self.m.to_string()),
            ("m_true", self.m_true.to_string()),
            ("max principal angle (deg)", format!("{:.6}", self.max_angle_deg)),
            ("|cos(v, g)|", fmt_opt(self.direction_cosine)),
            ("train accuracy", fmt_opt(self.train_accuracy)),
            ("held-out accuracy", fmt_opt(self.heldout_accuracy)),
            ("reconstruction RMSE", format!("{:.6e}", self.reconstruction_rmse)),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<28}{v:>16}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCurve {
    pub adapter_id: String,
    pub points: Vec<CurvePoint>,
    /// Least-squares slope of score against α.
    pub slope: f64,
    pub strictly_increasing: bool,
}

/// Classifier scores of `θ + α·v̂` for each α (sorted ascending).
pub fn score_curve(space: &W2WSpace, dir: &EditDirection, theta: &WeightVector, alphas: &[f64]) -> Result<ScoreCurve> {
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let edited = crate::direction::edit_theta(theta, dir, alpha)?;
        points.push(CurvePoint {
            alpha,
            score: dir.score(space, &edited)?,
        });
    }
    let n = points.len() as f64;
    let ma = points.iter().map(|p| p.alpha).sum::<f64>() / n;
    let ms = points.iter().map(|p| p.score).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.alpha - ma).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.alpha - ma) * (p.score - ms)).sum();
    Ok(ScoreCurve {
        adapter_id: theta.adapter_id.clone(),
        slope: if sxx > 0.0 { sxy / sxx } else { f64::NAN },
        strictly_increasing: points.windows(2).all(|w| w[1].score > w[0].score),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Candidates by descending cosine with `reference`, ties by id.
pub fn rank_by_similarity(candidates: &EmbeddingTable, reference: &[f32]) -> Result<Vec<Ranked>> {
    if let Some(d) = candidates.dim() {
        if d != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: reference.len(),
            });
        }
    }
    let reference = normalize("reference", reference)?;
    let mut ranked: Vec<Ranked> = candidates
        .iter()
        .map(|(id, v)| Ranked {
            id: id.to_string(),
            score: dot32(v, &reference),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n: usize,
    /// cos(base, full-rank adapter output).
    pub base_vs_full: MeanStd,
    /// cos(base, rank-1 adapter output).
    pub base_vs_rank1: MeanStd,
}

impl FidelityReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>12}{:>12}", "comparison", "mean", "std");
        for (k, s) in [
            ("base vs full LoRA", self.base_vs_full),
            ("base vs rank-1", self.base_vs_rank1),
        ] {
            let _ = writeln!(out, "{k:<24}{:>12.4}{:>12.4}", s.mean, s.std);
        }
        let _ = writeln!(out, "{:<24}{:>12}", "n", self.n);
        out
    }
}

fn ids_of(t: &EmbeddingTable) -> Vec<&str> {
    t.ids().collect()
}

/// Per-id cosine of base outputs against full-rank and rank-1 outputs.
pub fn fidelity_report(base: &EmbeddingTable, full: &EmbeddingTable, rank1: &EmbeddingTable) -> Result<FidelityReport> {
    let ids = ids_of(base);
    for (what, t) in [("full", full), ("rank1", rank1)] {
        if ids_of(t) != ids {
            return Err(Error::IdSetMismatch(format!(
                "base and {what} tables cover different ids"
            )));
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput("fidelity report needs at least one id".into()));
    }
    let cos = |other: &EmbeddingTable| -> Vec<f64> {
        ids.iter()
            .map(|id| dot32(base.get(id).expect("id"), other.get(id).expect("id")))
            .collect()
    };
    Ok(FidelityReport {
        n: ids.len(),
        base_vs_full: MeanStd::of(&cos(full)),
        base_vs_rank1: MeanStd::of(&cos(rank1)),
    })
}

/// Mean of `θ` rows, handy for oracles.
pub fn corpus_mean(vectors: &[WeightVector]) -> Array1<f64> {
    let dim = vectors.first().map_or(0, |v| v.theta.len());
    let mut acc = Array1::zeros(dim);
    for v in vectors {
        acc.iter_mut().zip(&v.theta).for_each(|(a, &t)| *a += t as f64);
    }
    acc / vectors.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::Modality;

    #[test]
    fn invalid_specs() {
        let d = SyntheticSpec::default;
        for s in [
            SyntheticSpec { m_true: 200, ..d() },
            SyntheticSpec { noise: -1.0, ..d() },
            SyntheticSpec {
                geometry: Geometry::LayerScale,
                m_true: 5,
                ..d()
            },
        ] {
            assert!(matches!(gen_corpus(&s), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn seeded_determinism() {
        let s = SyntheticSpec::default();
        assert_eq!(gen_corpus(&s).unwrap(), gen_corpus(&s).unwrap());
    }

    #[test]
    fn layer_scale_segments_are_positive_multiples() {
        let spec = SyntheticSpec {
            layers: default_layers(8, 6, 5),
            geometry: Geometry::LayerScale,
            n: 20,
            ..SyntheticSpec::default()
        };
        let c = gen_corpus(&spec).unwrap();
        let offs = c.layout.offsets();
        let a = &c.vectors[0].theta;
        let b = &c.vectors[1].theta;
        for (seg, off) in c.layout.segments.iter().zip(offs) {
            let len = seg.d + seg.k;
            let ratio = a[off] / b[off];
            assert!(ratio > 0.0);
            for i in 0..len {
                assert!((a[off + i] - ratio * b[off + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn multi_user_orbits() {
        let spec = SyntheticSpec {
            m_true: 3,
            n: 40,
            ..SyntheticSpec::default()
        };
        let c = gen_multi_user(&spec, 3).unwrap();
        assert_eq!(c.vectors.len(), 40);
        assert_eq!(c.labels.len(), 3);
        for set in &c.labels {
            assert_eq!(set.count(Label::Positive), 20);
        }
    }

    #[test]
    fn ranking_and_fidelity() {
        let t =
            EmbeddingTable::from_pairs(Modality::Image, "t", [("a", vec![1.0, 0.0]), ("b", vec![-1.0, 0.0])]).unwrap();
        let r = rank_by_similarity(&t, &[2.0, 0.0]).unwrap();
        assert_eq!(r[0].id, "a");
        assert!((r[0].score - 1.0).abs() < 1e-12);
        let f = fidelity_report(&t, &t, &t).unwrap();
        assert!((f.base_vs_rank1.mean - 1.0).abs() < 1e-12 && f.base_vs_rank1.std.abs() < 1e-12);
        let other = t.subset(["a"]);
        assert!(matches!(fidelity_report(&t, &other, &t), Err(Error::IdSetMismatch(_))));
    }
}

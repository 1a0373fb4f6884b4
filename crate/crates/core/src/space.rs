//! The W2W space: a mean-centred PCA basis over a corpus of weight vectors.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_json_atomic};
use crate::linalg::{canonical_sign, norm, sym_eig_desc};
use crate::reduction::{LayoutDescriptor, WeightVector};

pub const MEAN_TENSOR: &str = "__mean__";
pub const BASIS_TENSOR: &str = "__basis__";
pub const EIGENVALUES_TENSOR: &str = "__eigenvalues__";

/// Components whose eigenvalue falls below this fraction of the largest are
/// treated as numerical noise.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-10;

/// Default number of retained components: `min(N − 1, 100)`.
pub fn default_components(corpus_size: usize) -> usize {
    corpus_size.saturating_sub(1).min(100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMethod {
    /// Gram trick when D > N, covariance otherwise.
    #[default]
    Auto,
    /// Eigendecompose the N × N matrix of centred inner products.
    Gram,
    /// Eigendecompose the D × D covariance.
    Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2WSpace {
    /// Corpus mean μ, length D.
    pub mean: Array1<f64>,
    /// Row-orthonormal basis W, m × D.
    pub basis: Array2<f64>,
    /// Descending PCA variances, length m.
    pub eigenvalues: Vec<f64>,
    pub layout: LayoutDescriptor,
    pub corpus_ids: Vec<String>,
    /// Total corpus variance (trace of the covariance).
    pub total_variance: f64,
    pub requested_m: usize,
    /// Set when fewer than `requested_m` components carried variance.
    pub rank_deficient: bool,
}

/// Sidecar written next to the space archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceSidecar {
    layout: LayoutDescriptor,
    corpus_ids: Vec<String>,
    corpus_size: usize,
    requested_m: usize,
    m: usize,
    rank_deficient: bool,
    total_variance: f64,
}

fn centred(corpus: &[WeightVector], dim: usize) -> (Array1<f64>, Array2<f64>) {
    let n = corpus.len();
    let mut x = Array2::<f64>::zeros((n, dim));
    for (mut row, v) in x.rows_mut().into_iter().zip(corpus) {
        for (dst, src) in row.iter_mut().zip(&v.theta) {
            *dst = *src as f64;
        }
    }
    let mean = x.sum_axis(Axis(0)) / n as f64;
    x -= &mean;
    (mean, x)
}

/// `X · Xᵀ` with rows computed in parallel; every entry is a plain
/// sequential dot product, so the result does not depend on scheduling.
fn gram(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            (0..n).map(|j| xi.dot(&x.row(j))).collect()
        })
        .collect();
    let mut g = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, val) in row.into_iter().enumerate() {
            g[[i, j]] = val;
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = avg;
            g[[j, i]] = avg;
        }
    }
    g
}

/// Fits the space with `m` components.
pub fn build_space(corpus: &[WeightVector], layout: &LayoutDescriptor, m: usize) -> Result<W2WSpace> {
    build_space_with(corpus, layout, m, PcaMethod::Auto)
}

pub fn build_space_with(
    corpus: &[WeightVector],
    layout: &LayoutDescriptor,
    m: usize,
    method: PcaMethod,
) -> Result<W2WSpace> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::CorpusTooSmall { needed: 2, got: n });
    }
    for v in corpus {
        if v.layout_hash != layout.hash {
            return Err(Error::LayoutMismatch {
                expected: layout.hash.clone(),
                found: v.layout_hash.clone(),
            });
        }
        if v.theta.len() != layout.total_dim {
            return Err(Error::DimensionMismatch {
                expected: layout.total_dim,
                got: v.theta.len(),
            });
        }
    }
    let dim = layout.total_dim;
    let max_m = (n - 1).min(dim);
    if m == 0 || m > max_m {
        return Err(Error::InvalidInput(format!(
            "m = {m} outside 1..={max_m} for N = {n}, D = {dim}"
        )));
    }

    let (mean, x) = centred(corpus, dim);
    let denom = (n - 1) as f64;
    let use_gram = match method {
        PcaMethod::Auto => dim > n,
        PcaMethod::Gram => true,
        PcaMethod::Covariance => false,
    };

    let (values, mut rows): (Vec<f64>, Vec<Vec<f64>>) = if use_gram {
        let g = gram(&x) / denom;
        let eig = sym_eig_desc(g.view())?;
        let mut rows = Vec::new();
        for j in 0..m {
            let coeffs = eig.vectors.column(j);
            let w = x.t().dot(&coeffs).to_vec();
            rows.push(w);
        }
        (eig.values, rows)
    } else {
        let cov = x.t().dot(&x) / denom;
        let eig = sym_eig_desc(cov.view())?;
        let rows = (0..m).map(|j| eig.vectors.column(j).to_vec()).collect();
        (eig.values, rows)
    };

    let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;
    let lead = values.first().copied().unwrap_or(0.0).max(0.0);
    if lead == 0.0 {
        return Err(Error::DegenerateMatrix);
    }
    let kept = values
        .iter()
        .take(m)
        .take_while(|&&l| l > RELATIVE_EIGEN_FLOOR * lead)
        .count();
    let rank_deficient = kept < m;
    if rank_deficient {
        log::warn!("requested {m} components but only {kept} carry variance; truncating");
    }
    rows.truncate(kept);

    // Modified Gram-Schmidt in eigenvalue order; a no-op up to rounding for
    // the covariance path, restores orthogonality lost when mapping Gram
    // eigenvectors back for small eigenvalues.
    for j in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(j);
        let row = &mut rest[0];
        for q in done.iter() {
            let c: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
        let nr = norm(row);
        row.iter_mut().for_each(|a| *a /= nr);
        canonical_sign(row);
    }

    let mut basis = Array2::zeros((kept, dim));
    for (j, row) in rows.into_iter().enumerate() {
        basis.row_mut(j).assign(&Array1::from(row));
    }
    let eigenvalues = values.into_iter().take(kept).map(|l| l.max(0.0)).collect();
    Ok(W2WSpace {
        mean,
        basis,
        eigenvalues,
        layout: layout.clone(),
        corpus_ids: corpus.iter().map(|v| v.adapter_id.clone()).collect(),
        total_variance,
        requested_m: m,
        rank_deficient,
    })
}

impl W2WSpace {
    pub fn m(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn layout_hash(&self) -> &str {
        &self.layout.hash
    }

    fn check(&self, theta: &WeightVector) -> Result<()> {
        if theta.layout_hash != self.layout.hash {
            return Err(Error::LayoutMismatch {
                expected: self.layout.hash.clone(),
                found: theta.layout_hash.clone(),
            });
        }
        if theta.theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.theta.len(),
            });
        }
        Ok(())
    }

    /// Coefficients `c = W · (θ − μ)`.
    pub fn project(&self, theta: &WeightVector) -> Result<Vec<f64>> {
        self.check(theta)?;
        let centred: Array1<f64> = theta
            .theta
            .iter()
            .zip(self.mean.iter())
            .map(|(&t, m)| t as f64 - m)
            .collect();
        Ok(self.basis.dot(&centred).to_vec())
    }

    /// `μ + Wᵀ · c` at full precision.
    pub fn reconstruct_f64(&self, coeffs: &[f64]) -> Result<Array1<f64>> {
        if coeffs.len() != self.m() {
            return Err(Error::DimensionMismatch {
                expected: self.m(),
                got: coeffs.len(),
            });
        }
        Ok(&self.mean + &self.basis.t().dot(&ArrayView1::from(coeffs)))
    }

    pub fn reconstruct(&self, coeffs: &[f64], adapter_id: &str) -> Result<WeightVector> {
        let theta = self.reconstruct_f64(coeffs)?.iter().map(|&x| x as f32).collect();
        WeightVector::new(adapter_id, theta, &self.layout)
    }

    fn to_archive(&self) -> Result<TensorArchive> {
        let mut b = ArchiveBuilder::new();
        b.insert_metadata("layout_hash", self.layout.hash.clone());
        b.insert_metadata("corpus_size", self.corpus_ids.len().to_string());
        b.add_f64(MEAN_TENSOR, vec![self.dim()], self.mean.as_slice().expect("contiguous"))?;
        let basis: Vec<f64> = self.basis.iter().copied().collect();
        b.add_f64(BASIS_TENSOR, vec![self.m(), self.dim()], &basis)?;
        b.add_f64(EIGENVALUES_TENSOR, vec![self.m()], &self.eigenvalues)?;
        Ok(b.build())
    }

    /// Content digest over μ, W, λ and the layout hash.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_archive().expect("valid space").to_bytes())
    }

    /// Writes the archive and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)?;
        let sidecar = SpaceSidecar {
            layout: self.layout.clone(),
            corpus_ids: self.corpus_ids.clone(),
            corpus_size: self.corpus_ids.len(),
            requested_m: self.requested_m,
            m: self.m(),
            rank_deficient: self.rank_deficient,
            total_variance: self.total_variance,
        };
        write_json_atomic(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = TensorArchive::read(path)?;
        let sidecar: SpaceSidecar = read_json(&sidecar_path(path))?;
        let found = archive.metadata().get("layout_hash").cloned().unwrap_or_default();
        if found != sidecar.layout.hash {
            return Err(Error::LayoutMismatch {
                expected: sidecar.layout.hash,
                found,
            });
        }
        let mean = Array1::from(archive.tensor_f64(MEAN_TENSOR)?);
        let eigenvalues = archive.tensor_f64(EIGENVALUES_TENSOR)?;
        let (m, dim) = (eigenvalues.len(), mean.len());
        let basis = Array2::from_shape_vec((m, dim), archive.tensor_f64(BASIS_TENSOR)?)
            .map_err(|e| Error::ShapeMismatch(format!("basis: {e}")))?;
        if dim != sidecar.layout.total_dim {
            return Err(Error::DimensionMismatch {
                expected: sidecar.layout.total_dim,
                got: dim,
            });
        }
        Ok(Self {
            mean,
            basis,
            eigenvalues,
            layout: sidecar.layout,
            corpus_ids: sidecar.corpus_ids,
            total_variance: sidecar.total_variance,
            requested_m: sidecar.requested_m,
            rank_deficient: sidecar.rank_deficient,
        })
    }
}

/// `space.st` → `space.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::LayoutSegment;

    fn layout(d: usize, k: usize) -> LayoutDescriptor {
        LayoutDescriptor::new(vec![LayoutSegment { name: "L".into(), d, k }]).unwrap()
    }

    fn wv(id: &str, theta: Vec<f32>, layout: &LayoutDescriptor) -> WeightVector {
        WeightVector::new(id, theta, layout).unwrap()
    }

    #[test]
    fn two_point_pca() {
        let l = layout(2, 1);
        let corpus = vec![wv("a", vec![1.0, 2.0, 3.0], &l), wv("b", vec![3.0, 2.0, -1.0], &l)];
        let s = build_space(&corpus, &l, 1).unwrap();
        assert_eq!(s.m(), 1);
        let diff = [2.0, 0.0, -4.0];
        let dn = norm(&diff);
        let cos: f64 = s.basis.row(0).iter().zip(diff).map(|(w, d)| w * d / dn).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        let ca = s.project(&corpus[0]).unwrap()[0];
        let cb = s.project(&corpus[1]).unwrap()[0];
        assert!((ca + cb).abs() < 1e-9 && ca.abs() > 1.0);
    }

    #[test]
    fn project_basics() {
        let l = layout(2, 2);
        let corpus = vec![
            wv("a", vec![1.0, 0.0, 0.0, 0.0], &l),
            wv("b", vec![0.0, 2.0, 0.0, 0.0], &l),
            wv("c", vec![0.0, 0.0, 3.0, 1.0], &l),
        ];
        let s = build_space(&corpus, &l, 2).unwrap();
        let mu: Vec<f32> = s.mean.iter().map(|&x| x as f32).collect();
        let at_mean = s.project(&wv("m", mu, &l)).unwrap();
        assert!(at_mean.iter().all(|c| c.abs() < 1e-6));
        let shifted = s.reconstruct(&[2.0, 0.0], "s").unwrap();
        let c = s.project(&shifted).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-6 && c[1].abs() < 1e-6);
        let mu_again = s.reconstruct_f64(&[0.0, 0.0]).unwrap();
        assert_eq!(mu_again, s.mean);
        assert!(matches!(
            s.reconstruct(&[1.0], "x"),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn preconditions() {
        let l = layout(1, 1);
        let one = vec![wv("a", vec![1.0, 1.0], &l)];
        assert!(matches!(build_space(&one, &l, 1), Err(Error::CorpusTooSmall { .. })));
        let two = vec![wv("a", vec![1.0, 1.0], &l), wv("b", vec![0.0, 1.0], &l)];
        assert!(build_space(&two, &l, 2).is_err());
        let other = layout(2, 0);
        assert!(matches!(
            build_space(&two, &other, 1),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn collinear_corpus_is_rank_deficient() {
        let l = layout(2, 1);
        let corpus: Vec<_> = (0..5)
            .map(|i| wv(&format!("p{i}"), vec![i as f32, 2.0 * i as f32, 1.0], &l))
            .collect();
        let s = build_space(&corpus, &l, 3).unwrap();
        assert!(s.rank_deficient);
        assert_eq!(s.m(), 1);
    }
}

use ndarray::{Array2, ArrayView2};

use super::canonical_sign;
use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Array2<f64>,
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition.
///
/// Each eigenvector is sign-normalised so its largest-magnitude entry is
/// positive.
pub fn sym_eig_desc(s: ArrayView2<f64>) -> Result<SymEig> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", n, s.ncols())));
    }
    let scale = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s[[i, j]] - s[[j, i]]).abs());
        }
    }
    if scale > 0.0 && asym > 1e-8 * scale {
        return Err(Error::NotSymmetric(asym / scale));
    }

    // row-major working copy, symmetrised
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (s[[i, j]] + s[[j, i]]);
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // drop entries too small to change either diagonal element
                let g = 100.0 * apq.abs();
                if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + src]).collect();
        canonical_sign(&mut vec);
        for (k, x) in vec.into_iter().enumerate() {
            vectors[[k, col]] = x;
        }
    }
    Ok(SymEig { values, vectors })
}

//! Brute-force reference implementations for tests.
//!
//! Nothing in here shares code with `w2w-core`: matrices are plain
//! `Vec<Vec<f64>>`, randomness comes from a local SplitMix64, and every
//! routine is the slowest obviously-correct version of its computation.

#![allow(clippy::needless_range_loop)]

/// Row-major dense matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

/// SplitMix64 generator with a Box-Muller normal sampler.
#[derive(Debug, Clone)]
pub struct SplitMix {
    state: u64,
}

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Mat {
        (0..rows).map(|_| (0..cols).map(|_| self.normal()).collect()).collect()
    }

    pub fn unit_vector(&mut self, n: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..n).map(|_| self.normal()).collect();
            let norm = norm(&v);
            if norm > 1e-12 {
                return v.iter().map(|x| x / norm).collect();
            }
        }
    }
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    vec![vec![0.0; cols]; rows]
}

pub fn identity(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return Vec::new();
    }
    let (rows, cols) = (a.len(), a[0].len());
    let mut t = zeros(cols, rows);
    for i in 0..rows {
        for j in 0..cols {
            t[j][i] = a[i][j];
        }
    }
    t
}

/// Triple-loop matrix product.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let inner = b.len();
    let p = if inner == 0 { 0 } else { b[0].len() };
    let mut out = zeros(n, p);
    for i in 0..n {
        assert_eq!(a[i].len(), inner, "inner dimension mismatch");
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..inner {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|row| row.iter().map(|x| x * s).collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn frobenius(a: &Mat) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn outer(u: &[f64], v: &[f64]) -> Mat {
    u.iter().map(|ui| v.iter().map(|vj| ui * vj).collect()).collect()
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect()
}

/// Full thin SVD by one-sided (Hestenes) Jacobi rotations.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors, one per entry of `sigma` (each of length rows).
    pub u: Vec<Vec<f64>>,
    /// Singular values, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors, one per entry of `sigma` (each of length cols).
    pub v: Vec<Vec<f64>>,
}

/// One-sided Jacobi SVD. Works on matrices up to a few dozen per side.
pub fn jacobi_svd(a: &Mat) -> Svd {
    let rows = a.len();
    let cols = a[0].len();
    if rows < cols {
        let t = jacobi_svd(&transpose(a));
        return Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }
    // columns of `work` converge to sigma_j * u_j; `vecs` accumulates V.
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[i][j]).collect()).collect();
    let mut vecs: Vec<Vec<f64>> = identity(cols);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = work[p][i];
                    let wq = work[q][i];
                    work[p][i] = c * wp - s * wq;
                    work[q][i] = s * wp + c * wq;
                }
                for i in 0..cols {
                    let vp = vecs[p][i];
                    let vq = vecs[q][i];
                    vecs[p][i] = c * vp - s * vq;
                    vecs[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut triples: Vec<(f64, Vec<f64>, Vec<f64>)> = work
        .into_iter()
        .zip(vecs)
        .map(|(col, v)| {
            let s = norm(&col);
            let u = if s > 0.0 {
                col.iter().map(|x| x / s).collect()
            } else {
                vec![0.0; rows]
            };
            (s, u, v)
        })
        .collect();
    triples.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let mut out = Svd {
        u: Vec::new(),
        sigma: Vec::new(),
        v: Vec::new(),
    };
    for (s, u, v) in triples {
        out.sigma.push(s);
        out.u.push(u);
        out.v.push(v);
    }
    out
}

/// Best rank-1 approximation `sigma_1 * u_1 * v_1^T` from the Jacobi SVD.
pub fn best_rank1(a: &Mat) -> Mat {
    let svd = jacobi_svd(a);
    scale(&outer(&svd.u[0], &svd.v[0]), svd.sigma[0])
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut SplitMix) -> Mat {
    gram_schmidt_rows(&rng.normal_matrix(n, n))
}

/// Orthonormalises rows in order (classical Gram-Schmidt, applied twice).
pub fn gram_schmidt_rows(a: &Mat) -> Mat {
    let mut out: Mat = Vec::with_capacity(a.len());
    for row in a {
        let mut r = row.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&r, q);
                for (ri, qi) in r.iter_mut().zip(q) {
                    *ri -= c * qi;
                }
            }
        }
        let n = norm(&r);
        out.push(r.iter().map(|x| x / n).collect());
    }
    out
}

/// Sorts `(id, score)` pairs by descending score, ties by ascending id,
/// with a bubble sort so the ordering logic is independent of `sort_by`.
pub fn exhaustive_rank(items: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut v = items.to_vec();
    let n = v.len();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let swap = v[j].1 < v[j + 1].1 || (v[j].1 == v[j + 1].1 && v[j].0 > v[j + 1].0);
            if swap {
                v.swap(j, j + 1);
            }
        }
    }
    v
}

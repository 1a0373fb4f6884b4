use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{canonical_sign, dot, norm};
use crate::error::{Error, Result};

/// Leading singular triplet `(σ, u, v)` with `M v = σ u`.
///
/// Sign convention: the largest-magnitude entry of `u` is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SingularTriplet {
    /// `σ · u · vᵀ`.
    pub fn outer(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.u.len(), self.v.len()), |(i, j)| {
            self.sigma * self.u[i] * self.v[j]
        })
    }

    /// Applies the sign convention by flipping `u` and `v` together.
    pub fn normalize_sign(&mut self) {
        if canonical_sign(&mut self.u) {
            self.v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// A matrix that can be applied to vectors without being materialised.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `out = M x`
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = Mᵀ y`
    fn apply_t(&self, y: &[f64], out: &mut [f64]);
    fn frobenius_norm(&self) -> f64;
}

/// A dense matrix view.
pub struct DenseOp<'a>(pub ArrayView2<'a, f64>);

impl LinearOperator for DenseOp<'_> {
    fn rows(&self) -> usize {
        self.0.nrows()
    }

    fn cols(&self) -> usize {
        self.0.ncols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.0.rows()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (yi, row) in y.iter().zip(self.0.rows()) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }

    fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `scale · B · A` kept in factored form: A is r × k, B is d × r.
pub struct FactoredOp {
    down: Array2<f64>,
    up: Array2<f64>,
    scale: f64,
}

impl FactoredOp {
    pub fn new(down: ArrayView2<f32>, up: ArrayView2<f32>, scale: f64) -> Result<Self> {
        if up.ncols() != down.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "B is {}x{} but A is {}x{}",
                up.nrows(),
                up.ncols(),
                down.nrows(),
                down.ncols()
            )));
        }
        Ok(Self {
            down: down.mapv(f64::from),
            up: up.mapv(f64::from),
            scale,
        })
    }
}

impl LinearOperator for FactoredOp {
    fn rows(&self) -> usize {
        self.up.nrows()
    }

    fn cols(&self) -> usize {
        self.down.ncols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut mid = vec![0.0; self.down.nrows()];
        DenseOp(self.down.view()).apply(x, &mut mid);
        DenseOp(self.up.view()).apply(&mid, out);
        out.iter_mut().for_each(|o| *o *= self.scale);
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        let mut mid = vec![0.0; self.up.ncols()];
        DenseOp(self.up.view()).apply_t(y, &mut mid);
        DenseOp(self.down.view()).apply_t(&mid, out);
        out.iter_mut().for_each(|o| *o *= self.scale);
    }

    fn frobenius_norm(&self) -> f64 {
        // ‖BA‖²_F = tr((BᵀB)(AAᵀ)), both r × r
        let btb = self.up.t().dot(&self.up);
        let aat = self.down.dot(&self.down.t());
        let trace: f64 = btb.iter().zip(aat.iter()).map(|(x, y)| x * y).sum();
        self.scale.abs() * trace.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdOptions {
    /// Residual tolerance relative to ‖M‖_F.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
            seed: 0,
        }
    }
}

/// Seed for the single restart; any fixed value distinct from the first.
const RESTART_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

struct Attempt {
    triplet: SingularTriplet,
    residual: f64,
    converged: bool,
}

/// Power iteration on `MᵀM` (or `MMᵀ` when that is smaller).
fn power_iterate<M: LinearOperator + ?Sized>(op: &M, fro: f64, opts: &SvdOptions, seed: u64) -> Attempt {
    let (d, k) = (op.rows(), op.cols());
    let transpose = d < k;
    // `x` lives in the smaller space; `y` in the other.
    let (nx, ny) = if transpose { (d, k) } else { (k, d) };
    let fwd = |x: &[f64], out: &mut [f64]| {
        if transpose {
            op.apply_t(x, out)
        } else {
            op.apply(x, out)
        }
    };
    let bwd = |y: &[f64], out: &mut [f64]| {
        if transpose {
            op.apply(y, out)
        } else {
            op.apply_t(y, out)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..nx).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&x);
    x.iter_mut().for_each(|v| *v /= n0);

    let mut y = vec![0.0; ny];
    let mut back = vec![0.0; nx];
    let threshold = opts.tol * fro;
    let mut best = Attempt {
        triplet: SingularTriplet {
            sigma: 0.0,
            u: vec![0.0; d],
            v: vec![0.0; k],
        },
        residual: f64::INFINITY,
        converged: false,
    };

    for _ in 0..opts.max_iter.max(1) {
        fwd(&x, &mut y);
        let sigma = norm(&y);
        if sigma == 0.0 {
            // start vector in the null space
            break;
        }
        y.iter_mut().for_each(|v| *v /= sigma);
        bwd(&y, &mut back);
        // ‖M x − σ y‖ vanishes by construction; the other side carries the error.
        let residual = back
            .iter()
            .zip(&x)
            .map(|(b, xi)| (b - sigma * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual < best.residual {
            let (u, v) = if transpose {
                (x.clone(), y.clone())
            } else {
                (y.clone(), x.clone())
            };
            best.triplet = SingularTriplet { sigma, u, v };
            best.residual = residual;
        }
        if residual <= threshold {
            best.converged = true;
            break;
        }
        let nb = norm(&back);
        if nb == 0.0 {
            break;
        }
        x.iter_mut().zip(&back).for_each(|(xi, b)| *xi = b / nb);
    }
    best
}

/// Leading singular triplet of `op`.
///
/// Fails with `DegenerateMatrix` for a zero operator and with
/// `NotConverged` (carrying the best iterate) when neither the seeded start
/// nor one restart reaches `‖Mᵀu − σv‖ ≤ tol·‖M‖_F`.
pub fn top1_svd<M: LinearOperator + ?Sized>(op: &M, opts: &SvdOptions) -> Result<SingularTriplet> {
    if op.rows() == 0 || op.cols() == 0 {
        return Err(Error::ShapeMismatch("empty matrix".into()));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidInput(format!("tolerance {} must be positive", opts.tol)));
    }
    let fro = op.frobenius_norm();
    if fro == 0.0 {
        return Err(Error::DegenerateMatrix);
    }
    let mut attempt = power_iterate(op, fro, opts, opts.seed);
    if !attempt.converged {
        log::debug!(
            "power iteration stalled at residual {:.3e}; restarting",
            attempt.residual / fro
        );
        let retry = power_iterate(op, fro, opts, opts.seed.wrapping_add(RESTART_SEED_OFFSET));
        if retry.converged || retry.residual < attempt.residual {
            attempt = retry;
        }
    }
    let mut triplet = attempt.triplet;
    triplet.normalize_sign();
    if attempt.converged {
        Ok(triplet)
    } else {
        Err(Error::NotConverged {
            residual: attempt.residual / fro,
            best: Box::new(triplet),
        })
    }
}

impl SingularTriplet {
    /// Residuals `(‖Mv − σu‖, ‖Mᵀu − σv‖)`.
    pub fn residuals<M: LinearOperator + ?Sized>(&self, op: &M) -> (f64, f64) {
        let mut mv = vec![0.0; op.rows()];
        op.apply(&self.v, &mut mv);
        let mut mtu = vec![0.0; op.cols()];
        op.apply_t(&self.u, &mut mtu);
        let r1 = mv
            .iter()
            .zip(&self.u)
            .map(|(a, b)| (a - self.sigma * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let r2 = mtu
            .iter()
            .zip(&self.v)
            .map(|(a, b)| (a - self.sigma * b).powi(2))
            .sum::<f64>()
            .sqrt();
        (r1, r2)
    }

    pub fn unit_error(&self) -> f64 {
        (norm(&self.u) - 1.0).abs().max((norm(&self.v) - 1.0).abs())
    }

    pub fn u_dot(&self, other: &[f64]) -> f64 {
        dot(&self.u, other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_case() {
        let m = array![[3.0, 0.0], [0.0, 1.0]];
        let t = top1_svd(&DenseOp(m.view()), &SvdOptions::default()).unwrap();
        assert!((t.sigma - 3.0).abs() < 1e-9);
        assert!((t.u[0] - 1.0).abs() < 1e-9 && t.u[1].abs() < 1e-6);
        assert!((t.v[0] - 1.0).abs() < 1e-9 && t.v[1].abs() < 1e-6);
    }

    #[test]
    fn zero_is_degenerate() {
        let m = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            top1_svd(&DenseOp(m.view()), &SvdOptions::default()),
            Err(Error::DegenerateMatrix)
        ));
    }

    #[test]
    fn exact_tie_meets_residual_contract() {
        let m = array![[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let op = DenseOp(m.view());
        let t = top1_svd(&op, &SvdOptions::default()).unwrap();
        let (r1, r2) = t.residuals(&op);
        let fro = op.frobenius_norm();
        assert!(r1 <= 1e-7 * fro && r2 <= 1e-7 * fro);
        assert!((t.sigma - 2.0).abs() < 1e-9);
    }

    #[test]
    fn wide_and_tall_agree() {
        let m = array![[1.0, 2.0, 0.5, -1.0], [0.0, 1.0, 3.0, 2.0]];
        let wide = top1_svd(&DenseOp(m.view()), &SvdOptions::default()).unwrap();
        let mt = m.t().to_owned();
        let tall = top1_svd(&DenseOp(mt.view()), &SvdOptions::default()).unwrap();
        assert!((wide.sigma - tall.sigma).abs() < 1e-9);
        assert!((dot(&wide.u, &tall.v).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_iter_exhaustion_reports_best_iterate() {
        let m = array![[1.0, 0.0], [0.0, 0.999]];
        let opts = SvdOptions {
            tol: 1e-12,
            max_iter: 2,
            seed: 3,
        };
        match top1_svd(&DenseOp(m.view()), &opts) {
            Err(Error::NotConverged { best, residual }) => {
                assert!(best.sigma > 0.99 && residual > 1e-12);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn factored_matches_dense() {
        let down = array![[1.0f32, 0.5, -2.0], [0.0, 1.0, 1.0]];
        let up = array![[1.0f32, 0.0], [2.0, 1.0], [0.0, -1.0], [1.0, 1.0]];
        let f = FactoredOp::new(down.view(), up.view(), 0.5).unwrap();
        let dense = up.mapv(f64::from).dot(&down.mapv(f64::from)) * 0.5;
        let d = DenseOp(dense.view());
        assert!((f.frobenius_norm() - d.frobenius_norm()).abs() < 1e-12);
        let a = top1_svd(&f, &SvdOptions::default()).unwrap();
        let b = top1_svd(&d, &SvdOptions::default()).unwrap();
        assert!((a.sigma - b.sigma).abs() < 1e-9);
        assert!(a.u.iter().zip(&b.u).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

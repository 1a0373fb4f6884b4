//! Dense numerical kernels: top-1 SVD by power iteration, cyclic Jacobi
//! eigendecomposition and principal angles between subspaces.

mod eig;
mod svd;

pub use eig::{sym_eig_desc, SymEig};
pub use svd::{top1_svd, DenseOp, FactoredOp, LinearOperator, SingularTriplet, SvdOptions};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is
/// non-negative. Returns whether a flip happened.
pub fn canonical_sign(v: &mut [f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// Largest absolute deviation of `rows · rowsᵀ` from the identity.
pub fn orthonormality_error(rows: ArrayView2<f64>) -> f64 {
    let gram = rows.dot(&rows.t());
    let mut worst = 0.0f64;
    for ((i, j), g) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((g - target).abs());
    }
    worst
}

/// Principal angles (radians, ascending) between the row spaces of two
/// row-orthonormal bases sharing the ambient dimension.
pub fn principal_angles(u: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Vec<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch {
            expected: u.ncols(),
            got: v.ncols(),
        });
    }
    for basis in [u, v] {
        let dev = orthonormality_error(basis);
        if dev > 1e-6 {
            return Err(Error::NotOrthonormal(dev));
        }
    }
    let cross = u.dot(&v.t());
    let small: Array2<f64> = if cross.nrows() <= cross.ncols() {
        cross.dot(&cross.t())
    } else {
        cross.t().dot(&cross)
    };
    let eig = sym_eig_desc(small.view())?;
    let mut angles: Vec<f64> = eig
        .values
        .iter()
        .map(|s2| s2.max(0.0).sqrt().clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn angles_identical_and_orthogonal() {
        let u = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let a = principal_angles(u.view(), u.view()).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-7));
        let e1 = array![[1.0, 0.0]];
        let e2 = array![[0.0, 1.0]];
        let a = principal_angles(e1.view(), e2.view()).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn angles_known_rotation() {
        let t = 0.3f64;
        let u = array![[1.0, 0.0, 0.0]];
        let v = array![[t.cos(), t.sin(), 0.0]];
        let a = principal_angles(u.view(), v.view()).unwrap();
        assert!((a[0] - t).abs() < 1e-12);
    }

    #[test]
    fn angles_reject_non_orthonormal() {
        let u = array![[2.0, 0.0]];
        assert!(matches!(
            principal_angles(u.view(), u.view()),
            Err(Error::NotOrthonormal(_))
        ));
    }

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        assert!(canonical_sign(&mut v));
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
        let mut w = vec![0.5, -0.5];
        assert!(!canonical_sign(&mut w));
    }
}

//! Matrix head of the generator: vector → lower triangle → positive
//! diagonal → Cholesky product.

use crate::diffcore::kernels::{log_sigmoid, softplus, softplus_inv};
use crate::linalg::{pack_lower, tri_len, unpack_lower};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadError {
    #[error("vector of length {len} does not fill a triangle of dimension {d}")]
    Length { len: usize, d: usize },
    #[error("diagonal entry {index} is not positive ({value})")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Reshapes `v` (row-major lower triangle) into a lower-triangular matrix.
/// Unit Jacobian.
pub fn fill_triangular(v: &[f64], d: usize) -> Result<DMatrix<f64>, HeadError> {
    if v.len() != tri_len(d) {
        return Err(HeadError::Length { len: v.len(), d });
    }
    Ok(unpack_lower(v, d))
}

/// Inverse of [`fill_triangular`].
pub fn unravel(l: &DMatrix<f64>) -> Vec<f64> {
    pack_lower(l)
}

/// Softplus on the diagonal; returns the new factor and `Σ log σ(L_ii)`.
pub fn positive_diagonal(l: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut out = l.clone();
    let mut logdet = 0.0;
    for i in 0..l.nrows() {
        let x = l[(i, i)];
        out[(i, i)] = softplus(x);
        logdet += log_sigmoid(x);
    }
    (out, logdet)
}

pub fn positive_diagonal_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = l.clone();
    for i in 0..l.nrows() {
        out[(i, i)] = softplus_inv(l[(i, i)]);
    }
    out
}

/// Log-determinant of `L ↦ L Lᵀ` on the packed lower triangles:
/// `d log 2 + Σ_i (d − i + 1) log L_ii` (1-based `i`).
pub fn cholesky_log_det(l: &DMatrix<f64>) -> f64 {
    let d = l.nrows();
    let mut acc = d as f64 * std::f64::consts::LN_2;
    for i in 0..d {
        acc += (d - i) as f64 * l[(i, i)].ln();
    }
    acc
}

/// `Ω = L Lᵀ` and its log-Jacobian.
pub fn cholesky_product(l: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), HeadError> {
    for i in 0..l.nrows() {
        if !(l[(i, i)] > 0.0) {
            return Err(HeadError::NonPositiveDiagonal {
                index: i,
                value: l[(i, i)],
            });
        }
    }
    let omega = l * l.transpose();
    // exact symmetry
    let omega = (&omega + omega.transpose()) * 0.5;
    Ok((omega, cholesky_log_det(l)))
}

/// Positive-diagonal Cholesky factor of `Ω`.
pub fn cholesky_factor(omega: &DMatrix<f64>) -> Result<DMatrix<f64>, HeadError> {
    crate::linalg::cholesky_lower(omega).ok_or(HeadError::NotPositiveDefinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pack_lower, unpack_symmetric};

    /// Dense central-difference Jacobian of `f: R^n -> R^m`.
    fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> DMatrix<f64> {
        let m = f(x).len();
        let mut j = DMatrix::zeros(m, x.len());
        for c in 0..x.len() {
            let mut p = x.to_vec();
            let mut q = x.to_vec();
            p[c] += eps;
            q[c] -= eps;
            let (fp, fq) = (f(&p), f(&q));
            for r in 0..m {
                j[(r, c)] = (fp[r] - fq[r]) / (2.0 * eps);
            }
        }
        j
    }

    #[test]
    fn fill_order_and_inverse() {
        let l = fill_triangular(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 3.0]));
        assert_eq!(unravel(&l), vec![1.0, 2.0, 3.0]);
        assert!(matches!(fill_triangular(&[0.0; 119], 15), Err(HeadError::Length { .. })));
        assert!(fill_triangular(&[0.0; 120], 15).is_ok());
    }

    #[test]
    fn positive_diagonal_reference_values() {
        let (l, ld) = positive_diagonal(&DMatrix::zeros(2, 2));
        assert!((l[(0, 0)] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ld - 2.0 * 0.5f64.ln()).abs() < 1e-14);
        let (l, ld) = positive_diagonal(&DMatrix::from_element(1, 1, 50.0));
        assert!((l[(0, 0)] - 50.0).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }

    #[test]
    fn positive_diagonal_log_det_matches_jacobian() {
        let v = [0.3, -1.2, -0.4, 0.8, 2.0, 1.1];
        let f = |x: &[f64]| unravel(&positive_diagonal(&fill_triangular(x, 3).unwrap()).0);
        let jac = numeric_jacobian(f, &v, 1e-6);
        let (_, ld) = positive_diagonal(&fill_triangular(&v, 3).unwrap());
        assert!((jac.determinant().abs().ln() - ld).abs() < 1e-8);
    }

    #[test]
    fn cholesky_product_reference_values() {
        let (omega, ld) = cholesky_product(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(omega, DMatrix::identity(3, 3));
        assert!((ld - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);

        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 3.0]);
        let (omega, ld) = cholesky_product(&l).unwrap();
        assert_eq!(omega, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 10.0]));
        // numeric Jacobian of the packed map
        let f = |x: &[f64]| pack_lower(&cholesky_product(&unpack_lower(x, 2)).unwrap().0);
        let jac = numeric_jacobian(f, &pack_lower(&l), 1e-6);
        assert!((jac.determinant() - 48.0).abs() < 1e-6);
        assert!((ld - 48f64.ln()).abs() < 1e-12);

        assert_eq!(cholesky_factor(&omega).unwrap(), l);
        assert!(matches!(
            cholesky_product(&DMatrix::from_row_slice(1, 1, &[-1.0])),
            Err(HeadError::NonPositiveDiagonal { .. })
        ));
        let sym = unpack_symmetric(&pack_lower(&omega), 2);
        assert_eq!(sym, omega);
    }
}

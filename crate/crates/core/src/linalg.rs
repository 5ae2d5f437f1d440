//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::DMatrix;

/// Position of `(i, j)`, `j <= i`, in the row-major packing of a lower
/// triangle: `(0,0), (1,0), (1,1), (2,0), ...`.
#[inline]
pub const fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

#[inline]
pub const fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Packed index of a diagonal entry.
#[inline]
pub const fn diag_index(i: usize) -> usize {
    tri_index(i, i)
}

/// Unpacks a row-major lower triangle into a dense lower-triangular matrix.
pub fn unpack_lower(packed: &[f64], d: usize) -> DMatrix<f64> {
    assert_eq!(packed.len(), tri_len(d));
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            m[(i, j)] = packed[tri_index(i, j)];
        }
    }
    m
}

/// Unpacks a packed lower triangle into the full symmetric matrix.
pub fn unpack_symmetric(packed: &[f64], d: usize) -> DMatrix<f64> {
    assert_eq!(packed.len(), tri_len(d));
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let v = packed[tri_index(i, j)];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Packs the lower triangle (diagonal included) of a square matrix.
pub fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(tri_len(d));
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Lower Cholesky factor, or `None` when the matrix is not numerically
/// positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::linalg::Cholesky::new(m.clone()).map(|c| c.l())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Symmetric and Cholesky-factorizable.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-12 * (1.0 + m.amax())) && cholesky_lower(m).is_some()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `log det` through the Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    cholesky_lower(m).map(|l| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

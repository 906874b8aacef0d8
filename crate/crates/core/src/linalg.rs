//! Small dense helpers on top of nalgebra, plus slice kernels for the hot loops.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `out = m * x` for a row-major view of `m` over plain slices.
#[inline]
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o = acc;
    }
}

/// `out += m * x`.
#[inline]
pub(crate) fn matvec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o += acc;
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Inverse of a symmetric positive definite matrix via Cholesky, symmetrized.
pub(crate) fn spd_inverse(
    m: &DMatrix<f64>,
    what: &'static str,
    step: Option<usize>,
) -> Result<DMatrix<f64>> {
    let singular = || Error::Singular {
        what,
        location: crate::error::Location { sample: None, step },
    };
    if !all_finite(m) {
        return Err(singular());
    }
    let chol = m.clone().cholesky().ok_or_else(singular)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    if !all_finite(&inv) {
        return Err(singular());
    }
    Ok(inv)
}

/// A factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
///
/// Tries Cholesky first and falls back to `V diag(sqrt(max(λ, 0)))` for
/// singular inputs. Eigenvalues below `-neg_tol` are rejected.
pub fn psd_factor(m: &DMatrix<f64>, what: &str, neg_tol: f64) -> Result<DMatrix<f64>> {
    if !all_finite(m) {
        return Err(Error::NotPsd {
            what: what.to_string(),
            min_eigenvalue: f64::NAN,
        });
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.unpack());
    }
    let eig = s.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -neg_tol {
        return Err(Error::NotPsd {
            what: what.to_string(),
            min_eigenvalue: min,
        });
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

pub(crate) fn dims(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Builds a matrix from row-major nested rows; `None` if rows are ragged.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn vector_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

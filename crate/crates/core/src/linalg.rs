//! Small dense linear-algebra helpers shared by the Gaussian, graph and
//! NLPCA code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which a symmetric matrix is ridge-regularized
/// before inversion.
pub const RIDGE_CONDITION: f64 = 1e10;

/// Ridge size relative to the mean diagonal (`trace / dim`).
pub const RIDGE_SCALE: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn vec_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lo = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    eigen_range(m).0 >= -tol
}

fn condition(lo: f64, hi: f64) -> f64 {
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn inverse_from_eigen(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&inv_vals) * v.transpose()
}

/// Inverse of a symmetric positive (semi-)definite matrix.
///
/// When the condition number exceeds [`RIDGE_CONDITION`], a ridge of
/// `RIDGE_SCALE * trace / dim` is added to the diagonal first. Fails if the
/// matrix is still not positive definite, or is zero.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::dim(format!("{what} (square)"), n, m.ncols()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite { what: what.into() });
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let (lo, hi) = range_of(&eig);
    if condition(lo, hi) <= RIDGE_CONDITION {
        return Ok(symmetrize(&inverse_from_eigen(&eig)));
    }
    let trace = sym.trace();
    if !(trace > 0.0) || hi <= 0.0 {
        return Err(Error::singular(what));
    }
    let ridge = RIDGE_SCALE * trace / n as f64;
    let eig = SymmetricEigen::new(sym + DMatrix::identity(n, n) * ridge);
    let (lo, _) = range_of(&eig);
    if lo <= 0.0 {
        return Err(Error::singular(what));
    }
    Ok(symmetrize(&inverse_from_eigen(&eig)))
}

/// Inverse of a symmetric positive-definite matrix without regularization,
/// failing when the condition number exceeds `max_condition`.
pub fn spd_inverse_strict(
    m: &DMatrix<f64>,
    max_condition: f64,
    what: &str,
) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::dim(format!("{what} (square)"), n, m.ncols()));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite { what: what.into() });
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let (lo, hi) = range_of(&eig);
    if condition(lo, hi) >= max_condition {
        return Err(Error::singular(what));
    }
    Ok(symmetrize(&inverse_from_eigen(&eig)))
}

fn range_of(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> (f64, f64) {
    let lo = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Copies the rows and columns `idx` of a square matrix.
pub fn sub_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn sub_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

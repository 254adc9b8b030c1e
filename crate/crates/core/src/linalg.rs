//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the largest diagonal entry count as
/// singular.
const PIVOT_TOL: f64 = 1e-10;

/// Cholesky factorization that also rejects numerically singular matrices
/// (exact collinearity can survive floating point with a tiny positive pivot).
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularCovariance)?;
    let l = chol.l_dirty();
    for i in 0..a.nrows() {
        if l[(i, i)] * l[(i, i)] <= PIVOT_TOL * scale {
            return Err(Error::SingularCovariance);
        }
    }
    Ok(chol)
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = cholesky(a)?.inverse();
    Ok(symmetrize(&inv))
}

pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(a)?;
    let l = chol.l_dirty();
    Ok((0..a.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Mean-centered cross-product divided by `n` (population convention).
pub fn covariance(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = symmetrize(&(centered.transpose() * &centered / n));
    (mean, cov)
}

/// `rho^{|i-j|}`.
pub fn ar1_covariance(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Serde adapter storing a matrix as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

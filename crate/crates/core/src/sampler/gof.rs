use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Squared distance between the empirical cross-covariance vectors
/// `Cov(X_j, X_{-j})` and `Cov(X~_j, X_{-j})`. Zero when the dummy column equals
/// the original; grows as the dummy conditional drifts from the truth.
pub fn covariance_gof(x: &DMatrix<f64>, dummy: &[f64], j: usize) -> Result<f64> {
    let (n, d) = x.shape();
    if dummy.len() != n || j >= d {
        return Err(Error::shape(format!(
            "dummy column of length {} for {n}x{d} data, feature {j}",
            dummy.len()
        )));
    }
    let nf = n as f64;
    let mean_x: f64 = x.column(j).sum() / nf;
    let mean_t: f64 = dummy.iter().sum::<f64>() / nf;
    let mut total = 0.0;
    for k in (0..d).filter(|&k| k != j) {
        let col = x.column(k);
        let mean_k = col.sum() / nf;
        let mut diff = 0.0;
        for i in 0..n {
            diff += ((x[(i, j)] - mean_x) - (dummy[i] - mean_t)) * (col[i] - mean_k);
        }
        let diff = diff / nf;
        total += diff * diff;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_column_is_zero() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, 3.0, -1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 5.0, -3.0]);
        let col: Vec<f64> = x.column(1).iter().copied().collect();
        assert_eq!(covariance_gof(&x, &col, 1).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // x0 = [1, 2, 3], x1 = [0, 0, 3]; dummy for x0 = [3, 2, 1].
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 3.0]);
        // Cov(x0, x1) = 1, Cov(dummy, x1) = -1 -> distance 4.
        let v = covariance_gof(&x, &[3.0, 2.0, 1.0], 0).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert!(covariance_gof(&x, &[1.0], 0).is_err());
    }
}

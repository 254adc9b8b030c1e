//! Multivariate Gaussian fits and their full conditionals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub covariance: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::shape("covariance must be d x d"));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-10 * covariance.abs().max().max(1.0) {
            return Err(Error::shape("covariance is not symmetric"));
        }
        linalg::cholesky(&covariance)?;
        Ok(Self { mean, covariance })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    /// Default ridge used when fitting to data: `1e-6 * trace / d`.
    pub fn default_ridge(x: &DMatrix<f64>) -> f64 {
        let (_, cov) = linalg::covariance(x);
        1e-6 * cov.trace() / cov.nrows() as f64
    }

    pub fn standardized(&self, means: &[f64], stds: &[f64]) -> Result<Self> {
        let d = self.d();
        let mean = (0..d).map(|j| (self.mean[j] - means[j]) / stds[j]).collect();
        let cov = DMatrix::from_fn(d, d, |i, j| self.covariance[(i, j)] / (stds[i] * stds[j]));
        Self::new(mean, cov)
    }
}

/// Mean and covariance (`1/n` convention) plus `ridge * I`.
pub fn fit_gaussian(x: &DMatrix<f64>, ridge: f64) -> Result<GaussianModel> {
    if x.nrows() < 2 {
        return Err(Error::shape("need at least two samples to fit a Gaussian"));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be nonnegative".into()));
    }
    let (mean, mut cov) = linalg::covariance(x);
    for i in 0..cov.nrows() {
        cov[(i, i)] += ridge;
    }
    GaussianModel::new(mean, cov)
}

/// Regression form of every full conditional `X_j | X_{-j}`, computed once from
/// the precision matrix: `E[X_j | x] = mu_j + coef.row(j) . (x - mu)` with
/// `coef[(j, j)] = 0`, and `Var = 1 / Q_jj`.
#[derive(Debug, Clone)]
pub struct GaussianConditionals {
    pub mean: DVector<f64>,
    pub coef: DMatrix<f64>,
    pub cond_var: Vec<f64>,
    pub precision: DMatrix<f64>,
    pub log_det: f64,
}

impl GaussianConditionals {
    pub fn new(model: &GaussianModel) -> Result<Self> {
        let precision = linalg::spd_inverse(&model.covariance)?;
        let log_det = linalg::log_det_spd(&model.covariance)?;
        let d = model.d();
        let mut coef = DMatrix::zeros(d, d);
        let mut cond_var = Vec::with_capacity(d);
        for j in 0..d {
            let qjj = precision[(j, j)];
            if !(qjj > 0.0) {
                return Err(Error::SingularCovariance);
            }
            for k in 0..d {
                if k != j {
                    coef[(j, k)] = -precision[(j, k)] / qjj;
                }
            }
            cond_var.push(1.0 / qjj);
        }
        Ok(Self {
            mean: DVector::from_column_slice(&model.mean),
            coef,
            cond_var,
            precision,
            log_det,
        })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    /// Conditional means of feature `j` for every row of `x`.
    pub fn column_means(&self, x: &DMatrix<f64>, j: usize) -> Vec<f64> {
        let row = self.coef.row(j);
        let offset: f64 = self.mean[j] - row.dot(&self.mean.transpose());
        (0..x.nrows())
            .map(|i| offset + row.dot(&x.row(i)))
            .collect()
    }

    /// Conditional means of all features at once (`m x d`).
    pub fn all_means(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        let mut out = centered * self.coef.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        out
    }

    /// `(x_{-j} - mu_{-j})' Sigma_{-j,-j}^{-1} (x_{-j} - mu_{-j})` for every j,
    /// using the Schur identity on the full precision matrix.
    pub fn marginal_quad_forms(&self, row: &DVector<f64>) -> Vec<f64> {
        let centered = row - &self.mean;
        let qx = &self.precision * &centered;
        let full = centered.dot(&qx);
        (0..self.d())
            .map(|j| full - qx[j] * qx[j] / self.precision[(j, j)])
            .collect()
    }

    /// `log det Sigma_{-j,-j}`.
    pub fn marginal_log_det(&self, j: usize) -> f64 {
        self.log_det + self.precision[(j, j)].ln()
    }
}

/// Exact conditional mean and variance of `X_j` given the other coordinates.
pub fn gaussian_conditional_law(
    model: &GaussianModel,
    j: usize,
    x_minus_j: &[f64],
) -> Result<(f64, f64)> {
    let d = model.d();
    if j >= d {
        return Err(Error::shape(format!("feature {j} out of range for d = {d}")));
    }
    if x_minus_j.len() + 1 != d {
        return Err(Error::shape("conditioning vector must have length d - 1"));
    }
    let cond = GaussianConditionals::new(model)?;
    let full = insert_placeholder(x_minus_j, j);
    let m = cond.column_means(&DMatrix::from_row_slice(1, d, &full), j)[0];
    Ok((m, cond.cond_var[j]))
}

pub(crate) fn insert_placeholder(x_minus_j: &[f64], j: usize) -> Vec<f64> {
    let mut full = Vec::with_capacity(x_minus_j.len() + 1);
    full.extend_from_slice(&x_minus_j[..j]);
    full.push(0.0);
    full.extend_from_slice(&x_minus_j[j..]);
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Direct Schur complement with an explicit submatrix solve.
    fn schur_oracle(mu: &[f64], s: &DMatrix<f64>, j: usize, x_minus: &[f64]) -> (f64, f64) {
        let d = mu.len();
        let rest: Vec<usize> = (0..d).filter(|&k| k != j).collect();
        let s_rr = s.select_rows(&rest).select_columns(&rest);
        let s_jr = DVector::from_iterator(d - 1, rest.iter().map(|&k| s[(j, k)]));
        let diff = DVector::from_iterator(d - 1, rest.iter().zip(x_minus).map(|(&k, v)| v - mu[k]));
        let lu = s_rr.lu();
        let w = lu.solve(&s_jr).unwrap();
        (mu[j] + w.dot(&diff), s[(j, j)] - w.dot(&s_jr))
    }

    fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn identity_is_independent() {
        let m = GaussianModel::new(vec![0.5, -1.0, 2.0], DMatrix::identity(3, 3)).unwrap();
        let (mu, var) = gaussian_conditional_law(&m, 1, &[10.0, -3.0]).unwrap();
        assert!((mu + 1.0).abs() < 1e-14 && (var - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bivariate_closed_form() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let m = GaussianModel::new(vec![0.0, 0.0], s).unwrap();
        let (mu, var) = gaussian_conditional_law(&m, 0, &[2.0]).unwrap();
        assert!((mu - 1.0).abs() < 1e-12);
        assert!((var - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ar1_middle_coordinate() {
        let s = linalg::ar1_covariance(3, 0.25);
        let mu = vec![0.0; 3];
        let m = GaussianModel::new(mu.clone(), s.clone()).unwrap();
        let (got_m, got_v) = gaussian_conditional_law(&m, 1, &[0.7, -1.3]).unwrap();
        let (want_m, want_v) = schur_oracle(&mu, &s, 1, &[0.7, -1.3]);
        assert!((got_m - want_m).abs() < 1e-10 && (got_v - want_v).abs() < 1e-10);
    }

    #[test]
    fn agrees_with_schur_oracle_on_random_spd() {
        let mut rng = seed::rng(11, &[]);
        for _ in 0..30 {
            let d = rng.random_range(2..8);
            let s = random_spd(d, &mut rng);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = GaussianModel::new(mu.clone(), s.clone()).unwrap();
            for j in 0..d {
                let xm: Vec<f64> = (0..d - 1).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (gm, gv) = gaussian_conditional_law(&m, j, &xm).unwrap();
                let (wm, wv) = schur_oracle(&mu, &s, j, &xm);
                assert!((gm - wm).abs() < 1e-10, "{gm} vs {wm}");
                assert!((gv - wv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fit_recovers_standard_normal() {
        let mut rng = seed::rng(5, &[]);
        let x = DMatrix::from_fn(100_000, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = fit_gaussian(&x, 0.0).unwrap();
        assert!(m.mean.iter().all(|v| v.abs() < 0.02));
        let err = (&m.covariance - DMatrix::<f64>::identity(3, 3)).abs().max();
        assert!(err < 0.05);
    }

    #[test]
    fn degenerate_inputs() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(fit_gaussian(&one, 0.0), Err(Error::Shape(_))));
        let mut rng = seed::rng(2, &[]);
        let mut x = DMatrix::from_fn(50, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c0 = x.column(0).clone_owned();
        x.set_column(2, &c0);
        assert!(matches!(fit_gaussian(&x, 0.0), Err(Error::SingularCovariance)));
        assert!(fit_gaussian(&x, 1e-3).is_ok());
    }

    #[test]
    fn quad_forms_match_submatrix_solve() {
        let mut rng = seed::rng(3, &[]);
        let s = random_spd(5, &mut rng);
        let mu = vec![0.3, -0.2, 0.0, 1.0, 0.5];
        let c = GaussianConditionals::new(&GaussianModel::new(mu.clone(), s.clone()).unwrap()).unwrap();
        let row = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0, 0.0]);
        let q = c.marginal_quad_forms(&row);
        for j in 0..5 {
            let rest: Vec<usize> = (0..5).filter(|&k| k != j).collect();
            let srr = s.select_rows(&rest).select_columns(&rest);
            let diff = DVector::from_iterator(4, rest.iter().map(|&k| row[k] - mu[k]));
            let want = diff.dot(&srr.clone().lu().solve(&diff).unwrap());
            assert!((q[j] - want).abs() < 1e-9);
            let want_ld = srr.determinant().ln();
            assert!((c.marginal_log_det(j) - want_ld).abs() < 1e-9);
        }
    }
}

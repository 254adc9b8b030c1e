//! Gaussian mixtures fitted by EM, and sampling from their full conditionals.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gaussian::{insert_placeholder, GaussianConditionals, GaussianModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

/// Eigenvalue floor applied to every component covariance during EM.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianModel>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianModel>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::shape("one weight per component required"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::Config("mixture weights must be a probability vector".into()));
        }
        let d = components[0].d();
        if components.iter().any(|c| c.d() != d) {
            return Err(Error::shape("components differ in dimension"));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.components[0].d()
    }

    pub fn standardized(&self, means: &[f64], stds: &[f64]) -> Result<Self> {
        let comps = self
            .components
            .iter()
            .map(|c| c.standardized(means, stds))
            .collect::<Result<_>>()?;
        Self::new(self.weights.clone(), comps)
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood after each E-step.
    pub loglik: Vec<f64>,
    pub converged: bool,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Weighted mean/covariance M-step for one component, eigenvalues floored.
fn m_step_component(x: &DMatrix<f64>, resp: &[f64], c: usize) -> Result<(f64, GaussianModel)> {
    let (n, d) = x.shape();
    let nk: f64 = resp.iter().sum();
    if !(nk >= 1.0) {
        return Err(Error::DegenerateComponent(c));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += resp[i] * x[(i, j)];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut weighted = centered.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= resp[i];
    }
    let mut cov = linalg::symmetrize(&(centered.transpose() * weighted / nk));
    let eig = cov.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.max();
    if !(max_ev >= COVARIANCE_FLOOR) {
        return Err(Error::DegenerateComponent(c));
    }
    if eig.eigenvalues.min() < COVARIANCE_FLOOR {
        let clipped = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
        cov = linalg::symmetrize(
            &(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()),
        );
    }
    let model = GaussianModel::new(mean, cov).map_err(|_| Error::DegenerateComponent(c))?;
    Ok((nk / n as f64, model))
}

/// Per-sample component log-densities `log w_c + log N(x_i; mu_c, Sigma_c)`.
fn weighted_log_densities(x: &DMatrix<f64>, model: &GmmModel) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, model.k());
    for (c, comp) in model.components.iter().enumerate() {
        let chol = linalg::cholesky(&comp.covariance).map_err(|_| Error::DegenerateComponent(c))?;
        let log_det = linalg::log_det_spd(&comp.covariance)?;
        let mu = DVector::from_column_slice(&comp.mean);
        let base = model.weights[c].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        for i in 0..n {
            let diff = x.row(i).transpose() - &mu;
            let z = chol.l_dirty().solve_lower_triangular(&diff).unwrap();
            out[(i, c)] = base - 0.5 * z.norm_squared();
        }
    }
    Ok(out)
}

/// Fits a `k`-component full-covariance mixture by EM from seeded random
/// responsibilities. Stops when the relative log-likelihood gain drops below
/// `tol` or after `max_iter` iterations.
pub fn fit_gmm(x: &DMatrix<f64>, k: usize, rng_seed: u64, max_iter: usize, tol: f64) -> Result<GmmFit> {
    let (n, d) = x.shape();
    if k == 0 || n < k * (d + 1) {
        return Err(Error::Config(format!(
            "need n >= k (d + 1) samples for a {k}-component fit, got n = {n}, d = {d}"
        )));
    }
    let mut rng = seed::rng(rng_seed, &[seed::tag::LAW_FIT]);
    let mut resp = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.0..1.0) + 1e-3);
    for mut row in resp.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let mut loglik = Vec::new();
    let mut converged = false;
    let mut model;
    loop {
        let mut weights = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let col: Vec<f64> = resp.column(c).iter().copied().collect();
            let (w, g) = m_step_component(x, &col, c)?;
            weights.push(w);
            comps.push(g);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        model = GmmModel::new(weights, comps)?;

        let logd = weighted_log_densities(x, &model)?;
        let mut ll = 0.0;
        for i in 0..n {
            let row: Vec<f64> = logd.row(i).iter().copied().collect();
            let lse = log_sum_exp(&row);
            ll += lse;
            for c in 0..k {
                resp[(i, c)] = (row[c] - lse).exp();
            }
        }
        if let Some(&prev) = loglik.last() {
            let gain: f64 = (ll - prev) / f64::abs(prev).max(1e-300);
            loglik.push(ll);
            if gain < tol {
                converged = true;
                break;
            }
        } else {
            loglik.push(ll);
        }
        if loglik.len() >= max_iter {
            break;
        }
    }
    Ok(GmmFit {
        model,
        loglik,
        converged,
    })
}

/// Cached conditionals of every component of a mixture.
#[derive(Debug, Clone)]
pub struct GmmConditionals {
    pub log_weights: Vec<f64>,
    pub components: Vec<GaussianConditionals>,
}

impl GmmConditionals {
    pub fn new(model: &GmmModel) -> Result<Self> {
        Ok(Self {
            log_weights: model.weights.iter().map(|w| w.ln()).collect(),
            components: model
                .components
                .iter()
                .map(GaussianConditionals::new)
                .collect::<Result<_>>()?,
        })
    }

    pub fn k(&self) -> usize {
        self.log_weights.len()
    }

    pub fn d(&self) -> usize {
        self.components[0].d()
    }

    /// Posterior probabilities over components given `x_{-j}` (the value at
    /// position `j` of `row` is ignored), for every j.
    pub fn posteriors(&self, row: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.d();
        let k = self.k();
        let mut logp = DMatrix::zeros(d, k);
        for (c, comp) in self.components.iter().enumerate() {
            let q = comp.marginal_quad_forms(row);
            for j in 0..d {
                logp[(j, c)] = self.log_weights[c]
                    - 0.5 * ((d - 1) as f64 * (2.0 * PI).ln() + comp.marginal_log_det(j) + q[j]);
            }
        }
        let mut out = DMatrix::zeros(d, k);
        for j in 0..d {
            let row: Vec<f64> = logp.row(j).iter().copied().collect();
            let lse = log_sum_exp(&row);
            if !lse.is_finite() {
                return Err(Error::NumericalUnderflow);
            }
            for c in 0..k {
                out[(j, c)] = (row[c] - lse).exp();
            }
        }
        Ok(out)
    }
}

/// Draws `X_j` from the mixture conditional given `x_{-j}`.
pub fn gmm_conditional_sample(
    model: &GmmModel,
    j: usize,
    x_minus_j: &[f64],
    rng: &mut impl Rng,
) -> Result<f64> {
    let d = model.d();
    if j >= d || x_minus_j.len() + 1 != d {
        return Err(Error::shape("conditioning vector must have length d - 1"));
    }
    let cond = GmmConditionals::new(model)?;
    let row = DVector::from_vec(insert_placeholder(x_minus_j, j));
    let post = cond.posteriors(&row)?;
    let c = pick(post.row(j).iter().copied(), rng.random_range(0.0..1.0));
    let comp = &cond.components[c];
    let mean = comp.column_means(&DMatrix::from_row_slice(1, d, row.as_slice()), j)[0];
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + comp.cond_var[j].sqrt() * z)
}

/// Index selected by a uniform draw `u` against the given probabilities.
pub(crate) fn pick(probs: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (c, p) in probs.enumerate() {
        acc += p;
        last = c;
        if u < acc {
            return c;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::gaussian::fit_gaussian;

    fn normals(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seed::rng(seed, &[]);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn single_component_equals_gaussian_fit() {
        let x = normals(500, 4, 1);
        let fit = fit_gmm(&x, 1, 3, 50, 1e-10).unwrap();
        let g = fit_gaussian(&x, 0.0).unwrap();
        let comp = &fit.model.components[0];
        for j in 0..4 {
            assert!((comp.mean[j] - g.mean[j]).abs() < 1e-8);
        }
        assert!((&comp.covariance - &g.covariance).abs().max() < 1e-8);
        assert!((fit.model.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_separated_mixture_weights() {
        let mut rng = seed::rng(9, &[]);
        let n = 5000;
        let x = DMatrix::from_fn(n, 2, |i, _| {
            let shift = if i < 1500 { 10.0 } else { 0.0 };
            shift + rng.sample::<f64, _>(StandardNormal)
        });
        let fit = fit_gmm(&x, 2, 4, 200, 1e-10).unwrap();
        let mut w = fit.model.weights.clone();
        w.sort_by(f64::total_cmp);
        assert!((w[0] - 0.3).abs() < 0.05 && (w[1] - 0.7).abs() < 0.05, "{w:?}");
    }

    #[test]
    fn loglik_non_decreasing() {
        for s in 0..5 {
            let x = normals(300, 3, 100 + s);
            let fit = fit_gmm(&x, 3, s, 100, 0.0).unwrap();
            for w in fit.loglik.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", w);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let x = normals(10, 4, 1);
        assert!(matches!(fit_gmm(&x, 3, 0, 10, 1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_posterior_is_uniform() {
        let comp = |m: f64| GaussianModel::new(vec![m, 0.0], DMatrix::identity(2, 2)).unwrap();
        let model = GmmModel::new(vec![0.5, 0.5], vec![comp(-1.0), comp(1.0)]).unwrap();
        let cond = GmmConditionals::new(&model).unwrap();
        // condition on x_0 = 0 when sampling x_1: equidistant from both means.
        let post = cond.posteriors(&DVector::from_vec(vec![0.0, 5.0])).unwrap();
        assert!((post[(1, 0)] - 0.5).abs() < 1e-12);
        assert!((post[(1, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_concentrates_in_far_component() {
        let c1 = GaussianModel::new(vec![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
        let c2 = GaussianModel::new(vec![20.0, 20.0], s).unwrap();
        let model = GmmModel::new(vec![0.5, 0.5], vec![c1, c2]).unwrap();
        let mut rng = seed::rng(1, &[]);
        // x_0 = 20 sits deep in component 2, whose conditional is N(20, 0.36).
        let draws: Vec<f64> = (0..2000)
            .map(|_| gmm_conditional_sample(&model, 1, &[20.0], &mut rng).unwrap())
            .collect();
        let inside = draws.iter().filter(|v| (**v - 20.0).abs() < 4.0 * 0.6).count();
        assert!(inside as f64 >= 0.99 * draws.len() as f64);
    }
}

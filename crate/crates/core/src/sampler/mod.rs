//! Models of the feature distribution and dummy-feature sampling from the
//! full conditionals `X_j | X_{-j}`. Nothing in here ever sees the response.

mod gaussian;
mod gmm;
mod gof;
mod student_t;

pub use gaussian::{fit_gaussian, gaussian_conditional_law, GaussianConditionals, GaussianModel};
pub use gmm::{fit_gmm, gmm_conditional_sample, GmmConditionals, GmmFit, GmmModel, COVARIANCE_FLOOR};
pub use gof::covariance_gof;
pub use student_t::{StudentTConditionals, StudentTModel};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::StandardizationParams;
use crate::error::{Error, Result};
use crate::seed;

/// Where a law came from: the generating distribution or an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawSource {
    True,
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawModel {
    Gaussian(GaussianModel),
    Gmm(GmmModel),
    StudentT(StudentTModel),
}

impl LawModel {
    pub fn d(&self) -> usize {
        match self {
            LawModel::Gaussian(m) => m.d(),
            LawModel::Gmm(m) => m.d(),
            LawModel::StudentT(m) => m.d(),
        }
    }
}

#[derive(Debug, Clone)]
enum LawCache {
    Gaussian(GaussianConditionals),
    Gmm(GmmConditionals),
    StudentT(StudentTConditionals),
}

/// A fitted or known feature law with its per-feature conditionals cached.
/// Immutable once built; share freely across threads.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    model: LawModel,
    source: LawSource,
    cache: LawCache,
}

#[derive(Serialize, Deserialize)]
struct LawDocument {
    source: LawSource,
    model: LawModel,
}

impl ConditionalLaw {
    pub fn new(model: LawModel, source: LawSource) -> Result<Self> {
        let cache = match &model {
            LawModel::Gaussian(m) => LawCache::Gaussian(GaussianConditionals::new(m)?),
            LawModel::Gmm(m) => LawCache::Gmm(GmmConditionals::new(m)?),
            LawModel::StudentT(m) => LawCache::StudentT(StudentTConditionals::new(m)?),
        };
        Ok(Self {
            model,
            source,
            cache,
        })
    }

    pub fn gaussian(model: GaussianModel, source: LawSource) -> Result<Self> {
        Self::new(LawModel::Gaussian(model), source)
    }

    pub fn model(&self) -> &LawModel {
        &self.model
    }

    pub fn source(&self) -> LawSource {
        self.source
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    /// The same law expressed in standardized feature coordinates.
    pub fn standardized(&self, params: &StandardizationParams) -> Result<Self> {
        let (m, s) = (&params.feature_means[..], &params.feature_stds[..]);
        if m.len() != self.d() {
            return Err(Error::shape("standardization does not match law dimension"));
        }
        let model = match &self.model {
            LawModel::Gaussian(g) => LawModel::Gaussian(g.standardized(m, s)?),
            LawModel::Gmm(g) => LawModel::Gmm(g.standardized(m, s)?),
            LawModel::StudentT(t) => LawModel::StudentT(t.standardized(m, s)?),
        };
        Self::new(model, self.source)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&LawDocument {
            source: self.source,
            model: self.model.clone(),
        })
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LawDocument =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("law document: {e}")))?;
        Self::new(doc.model, doc.source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Precomputes, for each listed feature, the conditional law of that
    /// feature at every row of `x`. The returned columns can be sampled many
    /// times without repeating the linear algebra.
    pub fn prepare(&self, x: &DMatrix<f64>, features: &[usize]) -> Result<Vec<PreparedColumn>> {
        let (m, d) = x.shape();
        if d != self.d() {
            return Err(Error::shape(format!("law has d = {}, data has {d}", self.d())));
        }
        if let Some(&j) = features.iter().find(|&&j| j >= d) {
            return Err(Error::shape(format!("feature {j} out of range")));
        }
        match &self.cache {
            LawCache::Gaussian(c) => Ok(features
                .iter()
                .map(|&j| PreparedColumn::Gaussian {
                    mean: c.column_means(x, j),
                    sd: c.cond_var[j].sqrt(),
                })
                .collect()),
            LawCache::StudentT(c) => {
                let dof = c.cond_dof();
                let mut cols: Vec<(Vec<f64>, Vec<f64>)> = features
                    .iter()
                    .map(|&j| (c.scale.column_means(x, j), Vec::with_capacity(m)))
                    .collect();
                for i in 0..m {
                    let row: DVector<f64> = x.row(i).transpose();
                    let q = c.scale.marginal_quad_forms(&row);
                    for (slot, &j) in cols.iter_mut().zip(features) {
                        let s2 = (c.nu + q[j]) / dof * c.scale.cond_var[j];
                        slot.1.push(s2.sqrt());
                    }
                }
                Ok(cols
                    .into_iter()
                    .map(|(loc, scale)| PreparedColumn::StudentT { loc, scale, dof })
                    .collect())
            }
            LawCache::Gmm(c) => {
                let k = c.k();
                let mut probs = vec![Vec::with_capacity(m * k); features.len()];
                for i in 0..m {
                    let row: DVector<f64> = x.row(i).transpose();
                    let post = c.posteriors(&row)?;
                    for (slot, &j) in probs.iter_mut().zip(features) {
                        slot.extend(post.row(j).iter());
                    }
                }
                Ok(features
                    .iter()
                    .zip(probs)
                    .map(|(&j, probs)| {
                        let comp_means: Vec<Vec<f64>> =
                            c.components.iter().map(|g| g.column_means(x, j)).collect();
                        let means = (0..m)
                            .flat_map(|i| comp_means.iter().map(move |cm| cm[i]))
                            .collect();
                        let sds = c.components.iter().map(|g| g.cond_var[j].sqrt()).collect();
                        PreparedColumn::Mixture {
                            k,
                            probs,
                            means,
                            sds,
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Per-row conditional law of one feature, ready for repeated sampling.
#[derive(Debug, Clone)]
pub enum PreparedColumn {
    Gaussian {
        mean: Vec<f64>,
        sd: f64,
    },
    /// Row-major `m x k` posterior probabilities and component means.
    Mixture {
        k: usize,
        probs: Vec<f64>,
        means: Vec<f64>,
        sds: Vec<f64>,
    },
    StudentT {
        loc: Vec<f64>,
        scale: Vec<f64>,
        dof: f64,
    },
}

impl PreparedColumn {
    pub fn len(&self) -> usize {
        match self {
            PreparedColumn::Gaussian { mean, .. } => mean.len(),
            PreparedColumn::Mixture { sds, means, .. } => means.len() / sds.len(),
            PreparedColumn::StudentT { loc, .. } => loc.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fills `out` with one independent draw per row.
    pub fn draw_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        match self {
            PreparedColumn::Gaussian { mean, sd } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + sd * z;
                }
            }
            PreparedColumn::Mixture {
                k,
                probs,
                means,
                sds,
            } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let p = &probs[i * k..(i + 1) * k];
                    let c = gmm::pick(p.iter().copied(), rng.random_range(0.0..1.0));
                    let z: f64 = rng.sample(StandardNormal);
                    *o = means[i * k + c] + sds[c] * z;
                }
            }
            PreparedColumn::StudentT { loc, scale, dof } => {
                let chi = ChiSquared::new(*dof).expect("dof is positive");
                for (i, o) in out.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let w: f64 = chi.sample(rng);
                    *o = loc[i] + scale[i] * z / (w / dof).sqrt();
                }
            }
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.draw_into(rng, &mut out);
        out
    }
}

/// Dummy copies of the listed features for every row of `x`
/// (`m x |subset|`). Column `c` uses the stream `(rng_seed, j)` where
/// `j = subset[c]`, so results do not depend on the order of `subset`.
pub fn sample_dummies(
    law: &ConditionalLaw,
    x: &DMatrix<f64>,
    subset: &[usize],
    rng_seed: u64,
) -> Result<DMatrix<f64>> {
    if subset.is_empty() {
        return Err(Error::shape("empty feature subset"));
    }
    let prepared = law.prepare(x, subset)?;
    let m = x.nrows();
    let mut out = DMatrix::zeros(m, subset.len());
    for (c, (col, &j)) in prepared.iter().zip(subset).enumerate() {
        let mut rng = seed::rng(rng_seed, &[seed::tag::DUMMIES, j as u64]);
        col.draw_into(&mut rng, out.column_mut(c).as_mut_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn ar1_law(d: usize, rho: f64) -> ConditionalLaw {
        let g = GaussianModel::new(vec![0.0; d], linalg::ar1_covariance(d, rho)).unwrap();
        ConditionalLaw::gaussian(g, LawSource::True).unwrap()
    }

    fn draw_rows(law_cov: &DMatrix<f64>, n: usize, seed_: u64) -> DMatrix<f64> {
        let chol = linalg::cholesky(law_cov).unwrap();
        let mut rng = seed::rng(seed_, &[]);
        let d = law_cov.nrows();
        let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        z * chol.l().transpose()
    }

    #[test]
    fn deterministic_and_nonconstant() {
        let law = ar1_law(5, 0.3);
        let x = draw_rows(&linalg::ar1_covariance(5, 0.3), 50, 1);
        let a = sample_dummies(&law, &x, &[0, 3], 17).unwrap();
        let b = sample_dummies(&law, &x, &[0, 3], 17).unwrap();
        assert_eq!(a, b);
        let c = sample_dummies(&law, &x, &[3], 17).unwrap();
        assert_eq!(a.column(1), c.column(0));
        for col in a.column_iter() {
            let mean = col.mean();
            assert!(col.iter().any(|v| (v - mean).abs() > 1e-6));
        }
        assert!(sample_dummies(&law, &x, &[], 1).is_err());
        assert!(sample_dummies(&law, &x, &[5], 1).is_err());
    }

    #[test]
    fn law_json_round_trip() {
        let law = ar1_law(3, 0.5);
        let back = ConditionalLaw::from_json(&law.to_json().unwrap()).unwrap();
        assert_eq!(back.model(), law.model());
        assert_eq!(back.source(), LawSource::True);
    }

    /// Two-sample KS statistic.
    fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / a.len() as f64;
            let fb = j as f64 / b.len() as f64;
            best = best.max((fa - fb).abs());
        }
        best
    }

    #[test]
    fn single_component_mixture_matches_gaussian_draws() {
        let cov = linalg::ar1_covariance(4, 0.4);
        let g = GaussianModel::new(vec![0.1, 0.0, -0.2, 0.3], cov).unwrap();
        let gmm = GmmModel::new(vec![1.0], vec![g.clone()]).unwrap();
        let xm = [0.5, -1.0, 0.7];
        let (mu, var) = gaussian_conditional_law(&g, 2, &xm).unwrap();
        let mut r1 = seed::rng(1, &[]);
        let mut r2 = seed::rng(2, &[]);
        let n = 10_000;
        let a: Vec<f64> = (0..n)
            .map(|_| gmm_conditional_sample(&gmm, 2, &xm, &mut r1).unwrap())
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|_| mu + var.sqrt() * r2.sample::<f64, _>(StandardNormal))
            .collect();
        // 1% critical value of the two-sample KS statistic.
        let crit = 1.628 * ((2 * n) as f64 / (n * n) as f64).sqrt();
        assert!(ks(a, b) < crit);
    }

    #[test]
    fn student_t_conditional_moments() {
        // For a bivariate t with covariance S and nu, Var(X_1 | x_0) averaged
        // over x_0 equals the Gaussian Schur complement.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let t = StudentTModel::new(vec![0.0, 0.0], cov, 5.0).unwrap();
        let law = ConditionalLaw::new(LawModel::StudentT(t), LawSource::True).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let col = &law.prepare(&x, &[1]).unwrap()[0];
        match col {
            PreparedColumn::StudentT { loc, scale, dof } => {
                assert_eq!(*dof, 6.0);
                assert!(loc[0].abs() < 1e-12);
                // q = 0 -> scale^2 = nu / (nu + 1) * (1 - 0.25) * (nu - 2) / nu
                let want = (5.0 / 6.0 * 0.75 * 3.0 / 5.0f64).sqrt();
                assert!((scale[0] - want).abs() < 1e-12);
            }
            _ => panic!("wrong column kind"),
        }
    }

    #[test]
    fn gof_near_zero_under_true_law_and_decays() {
        let rho = 0.5;
        let cov = linalg::ar1_covariance(6, rho);
        let law = ar1_law(6, rho);
        let mean_gof = |n: usize| -> f64 {
            (0..30)
                .map(|t| {
                    let x = draw_rows(&cov, n, 1000 + t);
                    let dm = sample_dummies(&law, &x, &[2], t).unwrap();
                    covariance_gof(&x, dm.column(0).as_slice(), 2).unwrap()
                })
                .sum::<f64>()
                / 30.0
        };
        let small = mean_gof(1000);
        let large = mean_gof(4000);
        assert!(small < 0.02, "{small}");
        let ratio = small / large;
        assert!((2.5..6.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gof_grows_with_misspecification() {
        let cov = linalg::ar1_covariance(6, 0.5);
        let stat = |rho_hat: f64| -> f64 {
            let law = ar1_law(6, rho_hat);
            (0..50)
                .map(|t| {
                    let x = draw_rows(&cov, 500, 50 + t);
                    let dm = sample_dummies(&law, &x, &[2], t).unwrap();
                    covariance_gof(&x, dm.column(0).as_slice(), 2).unwrap()
                })
                .sum::<f64>()
                / 50.0
        };
        assert!(stat(0.8) > stat(0.5));
    }

    #[test]
    fn null_feature_swap_preserves_moments() {
        // Y depends only on X_0; the dummy for X_2 leaves (X_2, X_{-2}, Y)
        // moments unchanged.
        let cov = linalg::ar1_covariance(4, 0.5);
        let law = ar1_law(4, 0.5);
        let n = 40_000;
        let x = draw_rows(&cov, n, 7);
        let mut rng = seed::rng(8, &[]);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let dm = sample_dummies(&law, &x, &[2], 3).unwrap();
        let se = 4.0 / (n as f64).sqrt();
        let moments = |col: &[f64]| -> (f64, f64, f64, f64) {
            let nf = n as f64;
            let m = col.iter().sum::<f64>() / nf;
            let v = col.iter().map(|a| a * a).sum::<f64>() / nf;
            let cy = col.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / nf;
            let c1 = (0..n).map(|i| col[i] * x[(i, 1)]).sum::<f64>() / nf;
            (m, v, cy, c1)
        };
        let orig: Vec<f64> = x.column(2).iter().copied().collect();
        let (a, b) = (moments(&orig), moments(dm.column(0).as_slice()));
        assert!((a.0 - b.0).abs() < se);
        assert!((a.1 - b.1).abs() < 2.0 * se);
        assert!((a.2 - b.2).abs() < 4.0 * se);
        assert!((a.3 - b.3).abs() < 2.0 * se);
    }
}

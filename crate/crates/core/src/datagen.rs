//! Synthetic designs and responses with known ground truth.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sampler::{ConditionalLaw, GaussianModel, GmmModel, LawModel, LawSource, StudentTModel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DesignFamily {
    /// `N(0, Sigma)` with `Sigma_ij = rho^|i-j|`.
    Ar1Gaussian { rho: f64 },
    /// Equal-weight mixture of zero-mean AR(1) Gaussians, one per `rho`.
    GmmMixture { rhos: Vec<f64> },
    /// Multivariate t with AR(1) covariance and `nu` degrees of freedom.
    StudentT { rho: f64, nu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(flatten)]
    pub family: DesignFamily,
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("|rho| must be < 1, got {rho}")))
    }
}

impl DesignSpec {
    pub fn ar1(rho: f64, n: usize, d: usize, seed: u64) -> Self {
        Self {
            family: DesignFamily::Ar1Gaussian { rho },
            n,
            d,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("design needs d >= 2".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("design needs n >= 2".into()));
        }
        match &self.family {
            DesignFamily::Ar1Gaussian { rho } => check_rho(*rho),
            DesignFamily::GmmMixture { rhos } => {
                if rhos.is_empty() {
                    return Err(Error::Config("mixture needs at least one rho".into()));
                }
                rhos.iter().try_for_each(|&r| check_rho(r))
            }
            DesignFamily::StudentT { rho, nu } => {
                check_rho(*rho)?;
                if *nu > 2.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("Student t needs nu > 2, got {nu}")))
                }
            }
        }
    }

    /// The generating distribution as a conditional law.
    pub fn true_law(&self) -> Result<ConditionalLaw> {
        self.validate()?;
        let d = self.d;
        let model = match &self.family {
            DesignFamily::Ar1Gaussian { rho } => {
                LawModel::Gaussian(GaussianModel::new(vec![0.0; d], linalg::ar1_covariance(d, *rho))?)
            }
            DesignFamily::GmmMixture { rhos } => {
                let w = 1.0 / rhos.len() as f64;
                let comps = rhos
                    .iter()
                    .map(|&r| GaussianModel::new(vec![0.0; d], linalg::ar1_covariance(d, r)))
                    .collect::<Result<Vec<_>>>()?;
                LawModel::Gmm(GmmModel::new(vec![w; rhos.len()], comps)?)
            }
            DesignFamily::StudentT { rho, nu } => LawModel::StudentT(StudentTModel::new(
                vec![0.0; d],
                linalg::ar1_covariance(d, *rho),
                *nu,
            )?),
        };
        ConditionalLaw::new(model, LawSource::True)
    }
}

/// Fills `row` with a stationary AR(1) draw scaled by `scale`.
fn ar1_row(rho: f64, scale: f64, rng: &mut impl Rng, row: &mut [f64]) {
    let innov = (1.0 - rho * rho).sqrt();
    let mut prev: f64 = rng.sample(StandardNormal);
    row[0] = scale * prev;
    for v in row.iter_mut().skip(1) {
        let z: f64 = rng.sample(StandardNormal);
        prev = rho * prev + innov * z;
        *v = scale * prev;
    }
}

/// Draws `n` i.i.d. rows from the design family.
pub fn gen_design(spec: &DesignSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let mut rng = seed::rng(spec.seed, &[seed::tag::DATA_DESIGN]);
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        match &spec.family {
            DesignFamily::Ar1Gaussian { rho } => ar1_row(*rho, 1.0, &mut rng, &mut row),
            DesignFamily::GmmMixture { rhos } => {
                let c = rng.random_range(0..rhos.len());
                ar1_row(rhos[c], 1.0, &mut rng, &mut row);
            }
            DesignFamily::StudentT { rho, nu } => {
                let w: f64 = ChiSquared::new(*nu).expect("nu > 2").sample(&mut rng);
                let scale = ((nu - 2.0) / nu).sqrt() / (w / nu).sqrt();
                ar1_row(*rho, scale, &mut rng, &mut row);
            }
        }
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseModel {
    /// Linear: `X beta`.
    M1,
    /// Polynomial: `(X beta)^3 / 2`.
    M2,
    /// Sum of sines over the support: `sum_j sin(X_j beta_j)`.
    M3,
    /// Interactions: `sum_{j=1}^{15} X_{2j} X_{2j-1}`.
    M4,
}

fn default_sparsity() -> f64 {
    0.3
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub model: ResponseModel,
    #[serde(alias = "c")]
    pub amplitude: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Number of interacting pairs in the M4 model.
pub const M4_PAIRS: usize = 15;

impl ResponseSpec {
    pub fn new(model: ResponseModel, amplitude: f64, seed: u64) -> Self {
        Self {
            model,
            amplitude,
            sparsity: default_sparsity(),
            noise_sd: default_noise(),
            seed,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.amplitude >= 0.0) {
            return Err(Error::Config("amplitude must be >= 0".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config("sparsity must lie in (0, 1]".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be >= 0".into()));
        }
        if self.model == ResponseModel::M4 && d < 2 * M4_PAIRS {
            return Err(Error::Config(format!("M4 needs d >= {}", 2 * M4_PAIRS)));
        }
        Ok(())
    }

    /// Coefficients and non-null set implied by this spec for `d` features.
    pub fn ground_truth(&self, d: usize) -> Result<GroundTruth> {
        self.validate(d)?;
        match self.model {
            ResponseModel::M4 => Ok(GroundTruth {
                beta: vec![0.0; d],
                nonnull: (0..2 * M4_PAIRS).collect(),
            }),
            _ => gen_beta(d, self.sparsity, self.amplitude, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    /// 0-based non-null feature indices.
    pub nonnull: BTreeSet<usize>,
}

/// `round(sparsity * d)` entries of magnitude `c` with independent random
/// signs at uniformly chosen positions.
pub fn gen_beta(d: usize, sparsity: f64, c: f64, rng_seed: u64) -> Result<GroundTruth> {
    if c == 0.0 {
        return Ok(GroundTruth {
            beta: vec![0.0; d],
            nonnull: BTreeSet::new(),
        });
    }
    let k = (sparsity * d as f64).round() as usize;
    if k == 0 || k > d {
        return Err(Error::Config(format!(
            "sparsity {sparsity} gives {k} non-zeros for d = {d}"
        )));
    }
    let mut rng = seed::rng(rng_seed, &[seed::tag::DATA_BETA]);
    let positions = index::sample(&mut rng, d, k);
    let mut beta = vec![0.0; d];
    let mut nonnull = BTreeSet::new();
    for j in positions.iter() {
        beta[j] = if rng.random_bool(0.5) { c } else { -c };
        nonnull.insert(j);
    }
    Ok(GroundTruth { beta, nonnull })
}

/// The noiseless signal `g(X)`.
pub fn signal(x: &DMatrix<f64>, model: ResponseModel, truth: &GroundTruth) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if truth.beta.len() != d {
        return Err(Error::shape(format!("beta has {} entries, X has {d} columns", truth.beta.len())));
    }
    let beta = DVector::from_column_slice(&truth.beta);
    Ok(match model {
        ResponseModel::M1 => x * beta,
        ResponseModel::M2 => (x * beta).map(|v| v * v * v / 2.0),
        ResponseModel::M3 => DVector::from_fn(n, |i, _| {
            truth.nonnull.iter().map(|&j| (x[(i, j)] * truth.beta[j]).sin()).sum()
        }),
        ResponseModel::M4 => {
            if d < 2 * M4_PAIRS {
                return Err(Error::Config(format!("M4 needs d >= {}", 2 * M4_PAIRS)));
            }
            DVector::from_fn(n, |i, _| {
                (0..M4_PAIRS).map(|p| x[(i, 2 * p)] * x[(i, 2 * p + 1)]).sum()
            })
        }
    })
}

/// `Y = g(X) + eps` with seeded Gaussian noise.
pub fn gen_response(x: &DMatrix<f64>, spec: &ResponseSpec, truth: &GroundTruth) -> Result<DVector<f64>> {
    spec.validate(x.ncols())?;
    let g = signal(x, spec.model, truth)?;
    let mut rng = seed::rng(spec.seed, &[seed::tag::DATA_NOISE]);
    Ok(g.map(|v| {
        let e: f64 = rng.sample(StandardNormal);
        v + spec.noise_sd * e
    }))
}

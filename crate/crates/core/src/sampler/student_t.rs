//! Multivariate Student t laws, parameterized by their covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gaussian::{GaussianConditionals, GaussianModel};
use crate::error::{Error, Result};
use crate::linalg::serde_rows;

/// Zero-mean-shifted t law `mu + Z / sqrt(W / nu)` with `Z ~ N(0, S)`,
/// `W ~ chi2(nu)` and scale `S = covariance * (nu - 2) / nu`, so the
/// covariance of the law is exactly `covariance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTModel {
    pub mean: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub covariance: DMatrix<f64>,
    pub nu: f64,
}

impl StudentTModel {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>, nu: f64) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::Config("Student t needs nu > 2 for a finite covariance".into()));
        }
        GaussianModel::new(mean.clone(), covariance.clone())?;
        Ok(Self {
            mean,
            covariance,
            nu,
        })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn scale_model(&self) -> GaussianModel {
        GaussianModel {
            mean: self.mean.clone(),
            covariance: &self.covariance * ((self.nu - 2.0) / self.nu),
        }
    }

    pub fn standardized(&self, means: &[f64], stds: &[f64]) -> Result<Self> {
        let g = GaussianModel {
            mean: self.mean.clone(),
            covariance: self.covariance.clone(),
        }
        .standardized(means, stds)?;
        Self::new(g.mean, g.covariance, self.nu)
    }
}

/// The conditional of a multivariate t given `d - 1` coordinates is a
/// univariate t with `nu + d - 1` degrees of freedom, the Gaussian regression
/// location, and squared scale `(nu + q) / (nu + d - 1) * s_jj|rest`, where `q`
/// is the Mahalanobis form of the conditioning vector under the scale matrix.
#[derive(Debug, Clone)]
pub struct StudentTConditionals {
    pub scale: GaussianConditionals,
    pub nu: f64,
}

impl StudentTConditionals {
    pub fn new(model: &StudentTModel) -> Result<Self> {
        Ok(Self {
            scale: GaussianConditionals::new(&model.scale_model())?,
            nu: model.nu,
        })
    }

    pub fn cond_dof(&self) -> f64 {
        self.nu + (self.scale.d() - 1) as f64
    }
}

//! Predictive models: elastic net / lasso fitted by ADMM and a small gated
//! MLP, each in a base form and in a form penalized by the risk discrepancy
//! between original and dummy features.

mod admm;
mod mlp;
mod prox;
mod tuning;

pub use admm::{
    fit_elastic_net_admm, fit_mrd_elastic_net, solve_admm, AdmmReport, ElasticNetConfig,
    LinearMrdTerm,
};
pub use mlp::{
    fit_mlp, fit_mrd_mlp, mlp_objective, MlpConfig, MlpModel, MlpParams, MlpReport, MrdBatch,
};
pub use prox::{prox_elastic_net, soft_threshold};
pub use tuning::{alpha_grid, auto_lambda, cv_tune_penalty, validation_mse_mlp, CvResult};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::StandardizationParams;
use crate::error::{Error, Result};

/// Settings of the risk-discrepancy penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdConfig {
    /// Weight of the penalty; the data term is scaled by `1 - lambda`.
    pub lambda: f64,
    /// Features per step that receive fresh dummies. `None` picks the model's
    /// default (all features for linear models, `min(d, 32)` for the MLP).
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default = "yes")]
    pub resample_each_iter: bool,
}

fn yes() -> bool {
    true
}

impl MrdConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            subset_size: None,
            resample_each_iter: true,
        }
    }

    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "MRD lambda must lie in [0, 1), got {}",
                self.lambda
            )));
        }
        if let Some(n) = self.subset_size {
            if n == 0 || n > d {
                return Err(Error::Config(format!("subset size {n} outside 1..={d}")));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Sparse linear predictor on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub standardization: StandardizationParams,
}

impl LinearModel {
    /// Effective coefficients on the raw feature scale, plus raw intercept.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let p = &self.standardization;
        let coef: Vec<f64> = (0..self.beta.len())
            .map(|j| p.y_std * self.beta[j] / p.feature_stds[j])
            .collect();
        let icpt = p.y_mean + p.y_std * self.intercept
            - (0..coef.len()).map(|j| coef[j] * p.feature_means[j]).sum::<f64>();
        (coef, icpt)
    }
}

/// Precomputed predictions on a fixed feature matrix that can be
/// re-evaluated cheaply with one column replaced.
pub trait SwapEvaluator: Sync {
    fn base(&self) -> &[f64];
    /// Predictions with column `j` of the prepared matrix replaced by `col`.
    fn predict_swapped(&self, j: usize, col: &[f64], out: &mut [f64]);
}

/// Any trained model usable as the statistic inside a randomization test.
pub trait Predictor: Sync {
    fn d(&self) -> usize;
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>>;
    fn swap_evaluator<'a>(&'a self, x: &'a DMatrix<f64>) -> Result<Box<dyn SwapEvaluator + 'a>> {
        Ok(Box::new(GenericSwap {
            model: self,
            x,
            base: self.predict(x)?.as_slice().to_vec(),
        }))
    }
}

struct GenericSwap<'a, P: ?Sized> {
    model: &'a P,
    x: &'a DMatrix<f64>,
    base: Vec<f64>,
}

impl<P: Predictor + ?Sized> SwapEvaluator for GenericSwap<'_, P> {
    fn base(&self) -> &[f64] {
        &self.base
    }

    fn predict_swapped(&self, j: usize, col: &[f64], out: &mut [f64]) {
        let mut x = self.x.clone();
        x.column_mut(j).copy_from_slice(col);
        let p = self.model.predict(&x).expect("shape checked at construction");
        out.copy_from_slice(p.as_slice());
    }
}

fn check_cols(x: &DMatrix<f64>, d: usize) -> Result<()> {
    if x.ncols() == d {
        Ok(())
    } else {
        Err(Error::shape(format!("model expects {d} features, got {}", x.ncols())))
    }
}

impl Predictor for LinearModel {
    fn d(&self) -> usize {
        self.beta.len()
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_cols(x, self.d())?;
        let (coef, icpt) = self.raw_coefficients();
        Ok(x * DVector::from_vec(coef) + DVector::from_element(x.nrows(), icpt))
    }

    fn swap_evaluator<'a>(&'a self, x: &'a DMatrix<f64>) -> Result<Box<dyn SwapEvaluator + 'a>> {
        let base = self.predict(x)?.as_slice().to_vec();
        let (coef, _) = self.raw_coefficients();
        Ok(Box::new(LinearSwap { x, base, coef }))
    }
}

struct LinearSwap<'a> {
    x: &'a DMatrix<f64>,
    base: Vec<f64>,
    coef: Vec<f64>,
}

impl SwapEvaluator for LinearSwap<'_> {
    fn base(&self) -> &[f64] {
        &self.base
    }

    fn predict_swapped(&self, j: usize, col: &[f64], out: &mut [f64]) {
        let b = self.coef[j];
        let orig = self.x.column(j);
        for i in 0..out.len() {
            out[i] = self.base[i] + b * (col[i] - orig[i]);
        }
    }
}

/// A trained model of either kind, serializable for reuse across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("model document: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            FittedModel::Linear(m) => m,
            FittedModel::Mlp(m) => m,
        }
    }
}

impl Predictor for FittedModel {
    fn d(&self) -> usize {
        self.as_predictor().d()
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.as_predictor().predict(x)
    }

    fn swap_evaluator<'a>(&'a self, x: &'a DMatrix<f64>) -> Result<Box<dyn SwapEvaluator + 'a>> {
        self.as_predictor().swap_evaluator(x)
    }
}

/// Predictions of any model on raw features.
pub fn predict(model: &dyn Predictor, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    model.predict(x)
}

//! Penalty selection by K-fold cross-validation and the automatic choice of
//! the discrepancy weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::admm::{solve_admm, AdmmState, ElasticNetConfig};
use super::mlp::{fit_mlp, MlpConfig};
use super::Predictor;
use crate::data::{kfold_indices, split_train_test, Dataset, StandardizationParams};
use crate::error::{Error, Result};
use crate::seed;

/// `count` log-spaced values from `max_j |x_j' y| / m` down to a thousandth of it,
/// on the standardized scale of `data`.
pub fn alpha_grid(data: &Dataset, count: usize) -> Result<Vec<f64>> {
    let params = StandardizationParams::fit(&data.x, &data.y)?;
    let xs = params.apply_x(&data.x);
    let ys = params.apply_y(&data.y);
    let top = (xs.transpose() * ys / data.n() as f64).abs().max();
    if count == 1 {
        return Ok(vec![top]);
    }
    let ratio = 1e-3f64;
    Ok((0..count)
        .map(|i| top * ratio.powf(i as f64 / (count - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub alpha1: f64,
    /// Mean held-out MSE of the selected value, in units of the training fold's
    /// response variance.
    pub mse_validation: f64,
    /// Mean held-out MSE for every grid entry, in grid order.
    pub curve: Vec<f64>,
}

/// Picks `alpha1` from `grid` by `k`-fold cross-validation of the base
/// elastic net. Each fold is standardized with its own training statistics;
/// within a fold the grid is walked from the largest value down with warm starts.
pub fn cv_tune_penalty(
    data: &Dataset,
    grid: &[f64],
    k: usize,
    template: &ElasticNetConfig,
    rng_seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let folds = kfold_indices(data.n(), k, seed::derive(rng_seed, &[seed::tag::FOLDS]))?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let per_fold: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train = data.subset(&folds.complement(f));
            let test = data.subset(&folds.members(f));
            let params = StandardizationParams::fit(&train.x, &train.y)?;
            let (xs, ys) = (params.apply_x(&train.x), params.apply_y(&train.y));
            let (xt, yt) = (params.apply_x(&test.x), params.apply_y(&test.y));
            let mut errs = vec![0.0; grid.len()];
            let mut warm: Option<AdmmState> = None;
            for &g in &order {
                let cfg = ElasticNetConfig {
                    alpha1: grid[g],
                    trace_every: None,
                    ..template.clone()
                };
                let report = solve_admm(&xs, &ys, &cfg, warm.as_ref())?;
                let resid = &yt - &xt * &report.state.beta;
                errs[g] = resid.norm_squared() / yt.len() as f64;
                warm = Some(report.state);
            }
            Ok(errs)
        })
        .collect::<Result<_>>()?;

    let curve: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|e| e[g]).sum::<f64>() / k as f64)
        .collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| curve[a].total_cmp(&curve[b]).then(grid[b].total_cmp(&grid[a])))
        .expect("grid is non-empty");
    Ok(CvResult {
        alpha1: grid[best],
        mse_validation: curve[best],
        curve,
    })
}

/// Discrepancy weight `min(0.8, 0.8 * mse_validation)`.
pub fn auto_lambda(mse_validation: f64) -> f64 {
    (0.8 * mse_validation).min(0.8)
}

/// Held-out MSE (in units of the training response variance) of the base
/// network fitted on a random 80% of `data` and scored on the rest.
pub fn validation_mse_mlp(data: &Dataset, cfg: &MlpConfig, rng_seed: u64) -> Result<f64> {
    let split = split_train_test(data.n(), 0.8, seed::derive(rng_seed, &[seed::tag::TUNING]))?;
    let train = data.subset(&split.train);
    let test = data.subset(&split.test);
    let (model, _) = fit_mlp(&train, cfg, seed::derive(rng_seed, &[seed::tag::TUNING, seed::tag::FIT]))?;
    let pred = model.predict(&test.x)?;
    let sd = model.standardization.y_std;
    Ok((pred - &test.y).norm_squared() / (test.n() as f64 * sd * sd))
}

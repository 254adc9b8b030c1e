//! Holdout randomization tests: p-values from dummy-swapped test statistics,
//! the cross-fitted variant, and empirical risk discrepancies.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{kfold_indices, Dataset};
use crate::error::{Error, Result};
use crate::regression::{Predictor, SwapEvaluator};
use crate::sampler::{ConditionalLaw, PreparedColumn};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrtConfig {
    /// Dummy replicates per feature.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Features to test (0-based); all when absent.
    #[serde(default)]
    pub feature_subset: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    1000
}

impl HrtConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            feature_subset: None,
            seed,
        }
    }

    fn features(&self, d: usize) -> Result<Vec<usize>> {
        if self.k == 0 {
            return Err(Error::Config("HRT needs at least one dummy per feature".into()));
        }
        let f = self.feature_subset.clone().unwrap_or_else(|| (0..d).collect());
        if let Some(&j) = f.iter().find(|&&j| j >= d) {
            return Err(Error::shape(format!("feature {j} out of range for d = {d}")));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Tested features (0-based), aligned with the per-feature vectors below.
    pub features: Vec<usize>,
    pub pvalues: Vec<f64>,
    /// Mean squared error on the original test data.
    pub t_star: f64,
    /// `dummy_stats[c][k]`: mean squared error with feature `features[c]`
    /// replaced by its `k`-th dummy.
    pub dummy_stats: Vec<Vec<f64>>,
    /// Mean dummy statistic minus `t_star`.
    pub rd_hat: Vec<f64>,
}

impl TestReport {
    fn from_stats(features: Vec<usize>, t_star: f64, dummy_stats: Vec<Vec<f64>>) -> Self {
        let pvalues = dummy_stats.iter().map(|s| pvalue(t_star, s)).collect();
        let rd_hat = dummy_stats
            .iter()
            .map(|s| s.iter().map(|t| t - t_star).sum::<f64>() / s.len() as f64)
            .collect();
        Self {
            features,
            pvalues,
            t_star,
            dummy_stats,
            rd_hat,
        }
    }

    /// Writes `feature,pvalue,t_star,rd_hat` with 1-based feature numbers.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["feature", "pvalue", "t_star", "rd_hat"]).map_err(io)?;
        for c in 0..self.features.len() {
            w.write_record([
                (self.features[c] + 1).to_string(),
                self.pvalues[c].to_string(),
                self.t_star.to_string(),
                self.rd_hat[c].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes every dummy statistic as `feature,replicate,stat`.
    pub fn write_dummy_stats(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["feature", "replicate", "stat"]).map_err(io)?;
        for (c, stats) in self.dummy_stats.iter().enumerate() {
            for (k, s) in stats.iter().enumerate() {
                w.write_record([(self.features[c] + 1).to_string(), (k + 1).to_string(), s.to_string()])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads the `feature` and `pvalue` columns of a report written by
/// [`TestReport::write_csv`]; features come back 0-based.
pub fn load_pvalues_csv(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let headers = r.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            column: 0,
            message: format!("missing column {name:?}"),
        })
    };
    let (fc, pc) = (col("feature")?, col("pvalue")?);
    let mut features = Vec::new();
    let mut pvalues = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        let parse_err = |column: usize, message: String| Error::Parse { row, column: column + 1, message };
        let f: usize = rec[fc].trim().parse().map_err(|e| parse_err(fc, format!("{e}")))?;
        if f == 0 {
            return Err(parse_err(fc, "features are numbered from 1".into()));
        }
        let p: f64 = rec[pc].trim().parse().map_err(|e| parse_err(pc, format!("{e}")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(parse_err(pc, format!("p-value {p} outside [0, 1]")));
        }
        features.push(f - 1);
        pvalues.push(p);
    }
    Ok((features, pvalues))
}

/// `(y - prediction)^2`.
#[inline]
pub fn squared_error(prediction: f64, y: f64) -> f64 {
    let r = y - prediction;
    r * r
}

/// Squared error of `model` on a single raw feature row.
pub fn squared_error_stat(model: &dyn Predictor, x_row: &[f64], y: f64) -> Result<f64> {
    let x = DMatrix::from_row_slice(1, x_row.len(), x_row);
    Ok(squared_error(model.predict(&x)?[0], y))
}

/// `(1 + #{k : t_star >= dummy_k}) / (K + 1)`.
pub fn pvalue(t_star: f64, dummy_stats: &[f64]) -> f64 {
    let hits = dummy_stats.iter().filter(|&&t| t_star >= t).count();
    (1 + hits) as f64 / (dummy_stats.len() + 1) as f64
}

fn mean_sq(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, y)| squared_error(*p, *y)).sum::<f64>() / y.len() as f64
}

/// Dummy statistics for one feature under a fixed model.
fn replicate_stats(
    ev: &dyn SwapEvaluator,
    column: &PreparedColumn,
    y: &[f64],
    j: usize,
    k: usize,
    base_seed: u64,
) -> Vec<f64> {
    let m = y.len();
    let mut col = vec![0.0; m];
    let mut pred = vec![0.0; m];
    (0..k)
        .map(|r| {
            let mut rng = seed::rng(base_seed, &[seed::tag::HRT, j as u64, r as u64]);
            column.draw_into(&mut rng, &mut col);
            ev.predict_swapped(j, &col, &mut pred);
            mean_sq(&pred, y)
        })
        .collect()
}

/// Holdout randomization test of every configured feature. The model is used
/// as a fixed function; only column `j` of `test` is resampled from `law`.
/// Replicate `k` of feature `j` uses the stream `(seed, j, k)`, so results do
/// not depend on thread scheduling.
pub fn hrt_pvalues(
    model: &dyn Predictor,
    test: &Dataset,
    law: &ConditionalLaw,
    cfg: &HrtConfig,
) -> Result<TestReport> {
    let features = cfg.features(test.d())?;
    let ev = model.swap_evaluator(&test.x)?;
    let y = test.y.as_slice();
    let t_star = mean_sq(ev.base(), y);
    let prepared = law.prepare(&test.x, &features)?;
    let ev = ev.as_ref();
    let stats: Vec<Vec<f64>> = features
        .par_iter()
        .zip(prepared.par_iter())
        .map(|(&j, col)| replicate_stats(ev, col, y, j, cfg.k, cfg.seed))
        .collect();
    Ok(TestReport::from_stats(features, t_star, stats))
}

/// Empirical risk discrepancy of every feature: mean dummy-swapped MSE minus
/// the original MSE, over `k` dummies.
pub fn empirical_rd(
    model: &dyn Predictor,
    test: &Dataset,
    law: &ConditionalLaw,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    Ok(hrt_pvalues(model, test, law, &HrtConfig::new(k, rng_seed))?.rd_hat)
}

/// Tests a single feature and rejects when `p <= alpha`.
pub fn single_hypothesis_test(
    model: &dyn Predictor,
    test: &Dataset,
    law: &ConditionalLaw,
    j: usize,
    k: usize,
    alpha: f64,
    rng_seed: u64,
) -> Result<(f64, bool)> {
    let cfg = HrtConfig {
        k,
        feature_subset: Some(vec![j]),
        seed: rng_seed,
    };
    let p = hrt_pvalues(model, test, law, &cfg)?.pvalues[0];
    Ok((p, p <= alpha))
}

/// Cross-fitted randomization test. Each of `folds` models is fitted on the
/// complement of its fold and scores only its own held-out rows, so every
/// sample contributes one held-out statistic. `t_star` and each dummy
/// statistic are means over all `n` samples; in replicate `k` every fold
/// resamples feature `j` for its rows from the stream `(seed, j, k, fold)`.
pub fn cv_hrt_pvalues<F, M>(
    data: &Dataset,
    fit_fn: F,
    law: &ConditionalLaw,
    folds: usize,
    cfg: &HrtConfig,
) -> Result<TestReport>
where
    F: Fn(&Dataset, u64) -> Result<M> + Sync,
    M: Predictor,
{
    if folds < 2 {
        return Err(Error::InvalidK { n: data.n(), k: folds });
    }
    let features = cfg.features(data.d())?;
    let assignment = kfold_indices(data.n(), folds, seed::derive(cfg.seed, &[seed::tag::FOLDS]))?;
    let parts: Vec<(Dataset, M)> = (0..folds)
        .map(|f| {
            let train = data.subset(&assignment.complement(f));
            let held = data.subset(&assignment.members(f));
            let model = fit_fn(&train, seed::derive(cfg.seed, &[seed::tag::FIT, f as u64]))?;
            Ok((held, model))
        })
        .collect::<Result<_>>()?;
    let mut evals = Vec::with_capacity(folds);
    let mut prepared = Vec::with_capacity(folds);
    let mut total = 0.0;
    for (held, model) in &parts {
        let ev = model.swap_evaluator(&held.x)?;
        total += mean_sq(ev.base(), held.y.as_slice()) * held.n() as f64;
        prepared.push(law.prepare(&held.x, &features)?);
        evals.push(ev);
    }
    let n = data.n() as f64;
    let t_star = total / n;

    let stats: Vec<Vec<f64>> = features
        .par_iter()
        .enumerate()
        .map(|(c, &j)| {
            let mut scratch: Vec<(Vec<f64>, Vec<f64>)> =
                parts.iter().map(|(h, _)| (vec![0.0; h.n()], vec![0.0; h.n()])).collect();
            (0..cfg.k)
                .map(|r| {
                    let mut sum = 0.0;
                    for (f, ((held, _), (col, pred))) in parts.iter().zip(scratch.iter_mut()).enumerate() {
                        let mut rng = seed::rng(cfg.seed, &[seed::tag::HRT, j as u64, r as u64, f as u64]);
                        prepared[f][c].draw_into(&mut rng, col);
                        evals[f].predict_swapped(j, col, pred);
                        sum += mean_sq(pred, held.y.as_slice()) * held.n() as f64;
                    }
                    sum / n
                })
                .collect()
        })
        .collect();
    Ok(TestReport::from_stats(features, t_star, stats))
}

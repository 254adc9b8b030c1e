//! Configuration-driven Monte Carlo studies: per trial, simulate data, fit
//! every configured method, test all features, select, and score against
//! the known truth. Trials run in parallel and are gathered in order.
//!
//! Seeds follow one chain: trial `t` uses `derive(base_seed, [TRIAL, t])`;
//! inside it data, split, law fit, and method `i` (fit, test) each get their
//! own role tag, so no trial or method reads another's stream.

mod config;
mod report;

pub use config::{
    ExperimentConfig, LawSpec, MethodSpec, ModelKind, SelectionSpec, SolverOverrides, TestSpec,
    DEFAULT_ENET_ALPHA2, SPEC_VERSION,
};
pub use report::{emit_reports, qq_rows, summarize, MethodSummary, QqRow, Summary};

use std::collections::{BTreeSet, HashMap};

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_feature_csv, split_train_test, Dataset};
use crate::datagen::{gen_design, gen_response, GroundTruth};
use crate::error::{Error, Result};
use crate::regression::{
    alpha_grid, auto_lambda, cv_tune_penalty, fit_elastic_net_admm, fit_mlp, fit_mrd_elastic_net,
    fit_mrd_mlp, validation_mse_mlp, CvResult, FittedModel, LinearModel, MrdConfig, Predictor,
};
use crate::sampler::{fit_gaussian, fit_gmm, ConditionalLaw, GaussianModel, LawModel, LawSource};
use crate::seed;
use crate::selection::select;
use crate::testing::{cv_hrt_pvalues, empirical_rd, hrt_pvalues, HrtConfig, TestReport};

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: String,
    pub rmse: Option<f64>,
    pub fdp: Option<f64>,
    pub power: Option<f64>,
    pub num_rejected: Option<usize>,
    pub alpha1: Option<f64>,
    pub lambda: Option<f64>,
    pub pvalues_file: String,
    pub rd_h1_q25: Option<f64>,
    pub rd_h1_q50: Option<f64>,
    pub rd_h1_q75: Option<f64>,
    pub rd_h0_q75: Option<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    fn failed(trial: usize, method: String, err: &Error) -> Self {
        Self {
            trial,
            pvalues_file: String::new(),
            method,
            rmse: None,
            fdp: None,
            power: None,
            num_rejected: None,
            alpha1: None,
            lambda: None,
            rd_h1_q25: None,
            rd_h1_q50: None,
            rd_h1_q75: None,
            rd_h0_q75: None,
            error: Some(err.to_string()),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Discrepancy quantiles at one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub trial: usize,
    pub method: String,
    pub iteration: usize,
    pub h1_q25: f64,
    pub h1_q50: f64,
    pub h1_q75: f64,
    pub h0_q75: f64,
}

/// Everything one method produced in one trial.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub record: TrialRecord,
    pub report: Option<TestReport>,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub truth: Option<BTreeSet<usize>>,
    pub methods: Vec<MethodOutcome>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trials: Vec<TrialOutcome>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    pub fn records(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().flat_map(|t| t.methods.iter().map(|m| &m.record))
    }

    pub fn failed_records(&self) -> usize {
        self.records().filter(|r| !r.ok()).count()
    }
}

/// Linearly interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn split_by_truth(rd: &[f64], features: &[usize], truth: &BTreeSet<usize>) -> (Vec<f64>, Vec<f64>) {
    let mut h1 = Vec::new();
    let mut h0 = Vec::new();
    for (v, j) in rd.iter().zip(features) {
        if truth.contains(j) {
            h1.push(*v);
        } else {
            h0.push(*v);
        }
    }
    (h1, h0)
}

/// Runs all trials on `workers` threads (all available when `None`).
/// Output does not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let fixed = match &cfg.features_csv {
        Some(path) => Some(load_feature_csv(path)?.x),
        None => None,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        pool = pool.num_threads(w.max(1));
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let trials: Vec<TrialOutcome> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, t, fixed.as_ref()))
            .collect()
    });
    let summary = summarize(cfg, &trials);
    Ok(ExperimentOutcome { trials, summary })
}

struct TrialData {
    train: Dataset,
    test: Dataset,
    all: Dataset,
    truth: GroundTruth,
}

fn trial_data(cfg: &ExperimentConfig, trial_seed: u64, fixed: Option<&DMatrix<f64>>) -> Result<TrialData> {
    let x = match fixed {
        Some(x) => x.clone(),
        None => {
            let mut design = cfg.design.clone().expect("validated");
            design.seed = seed::derive(trial_seed, &[seed::tag::DATA_DESIGN]);
            gen_design(&design)?
        }
    };
    let mut response = cfg.response.clone();
    response.seed = seed::derive(trial_seed, &[seed::tag::DATA_BETA]);
    let truth = response.ground_truth(x.ncols())?;
    let y = gen_response(&x, &response, &truth)?;
    let all = Dataset::new(x, y)?.with_truth(truth.nonnull.clone())?;
    let (train, test) = match cfg.test {
        TestSpec::Hrt { .. } => {
            let split = split_train_test(all.n(), cfg.train_fraction, seed::derive(trial_seed, &[seed::tag::SPLIT]))?;
            (all.subset(&split.train), all.subset(&split.test))
        }
        TestSpec::CvHrt { .. } => (all.clone(), all.clone()),
    };
    Ok(TrialData { train, test, all, truth })
}

fn trial_law(cfg: &ExperimentConfig, x: &DMatrix<f64>, trial_seed: u64) -> Result<ConditionalLaw> {
    match &cfg.law {
        LawSpec::True => cfg.design.as_ref().expect("validated").true_law(),
        LawSpec::GaussianFit => {
            let model = fit_gaussian(x, GaussianModel::default_ridge(x))?;
            ConditionalLaw::gaussian(model, LawSource::Fitted)
        }
        LawSpec::GmmFit { k } => {
            let fit = fit_gmm(x, *k, seed::derive(trial_seed, &[seed::tag::LAW_FIT]), 500, 1e-8)?;
            ConditionalLaw::new(LawModel::Gmm(fit.model), LawSource::Fitted)
        }
    }
}

fn run_trial(cfg: &ExperimentConfig, t: usize, fixed: Option<&DMatrix<f64>>) -> TrialOutcome {
    let trial_seed = seed::derive(cfg.base_seed, &[seed::tag::TRIAL, t as u64]);
    let setup = trial_data(cfg, trial_seed, fixed).and_then(|data| {
        let law_x = match cfg.test {
            TestSpec::Hrt { .. } => &data.train.x,
            TestSpec::CvHrt { .. } => &data.all.x,
        };
        let law = trial_law(cfg, law_x, trial_seed)?;
        Ok((data, law))
    });
    let (data, law) = match setup {
        Ok(s) => s,
        Err(e) => {
            warn!("trial {t} failed during setup: {e}");
            return TrialOutcome {
                trial: t,
                truth: None,
                methods: cfg
                    .methods
                    .iter()
                    .map(|m| MethodOutcome {
                        record: TrialRecord::failed(t, m.label(), &e),
                        report: None,
                        trajectory: Vec::new(),
                    })
                    .collect(),
            };
        }
    };
    let mut tuner = Tuner::default();
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let method_seed = seed::derive(trial_seed, &[seed::tag::MODEL, i as u64]);
            match run_method(cfg, t, spec, method_seed, &data, &law, &mut tuner) {
                Ok(o) => o,
                Err(e) => {
                    warn!("trial {t}, {}: {e}", spec.label());
                    MethodOutcome {
                        record: TrialRecord::failed(t, spec.label(), &e),
                        report: None,
                        trajectory: Vec::new(),
                    }
                }
            }
        })
        .collect();
    info!("trial {t} done");
    TrialOutcome {
        trial: t,
        truth: Some(data.truth.nonnull),
        methods,
    }
}

/// Per-trial cache of base-model tuning, shared by a base method and its
/// penalized counterpart.
#[derive(Default)]
struct Tuner {
    linear: HashMap<(ModelKind, u64, Option<u64>), CvResult>,
    mlp: HashMap<String, f64>,
}

impl Tuner {
    fn linear(&mut self, tuning: Tuning, spec: &MethodSpec, train: &Dataset, trial_seed_tune: u64) -> Result<CvResult> {
        let key = (spec.model, spec.alpha2().to_bits(), spec.alpha1.map(f64::to_bits));
        if let Some(r) = self.linear.get(&key) {
            return Ok(r.clone());
        }
        let grid = match spec.alpha1 {
            Some(a) => vec![a],
            None => alpha_grid(train, tuning.grid_size)?,
        };
        let r = cv_tune_penalty(train, &grid, tuning.folds, &spec.solver_config(0.0), trial_seed_tune)?;
        self.linear.insert(key, r.clone());
        Ok(r)
    }

    fn mlp(&mut self, spec: &MethodSpec, train: &Dataset, trial_seed_tune: u64) -> Result<f64> {
        let c = spec.mlp_config();
        let key = serde_json::to_string(&c).expect("config serializes");
        if let Some(v) = self.mlp.get(&key) {
            return Ok(*v);
        }
        let v = validation_mse_mlp(train, &c, trial_seed_tune)?;
        self.mlp.insert(key, v);
        Ok(v)
    }
}

/// Cross-validation settings for penalty tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tuning {
    pub folds: usize,
    pub grid_size: usize,
}

impl From<&ExperimentConfig> for Tuning {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            folds: c.cv_folds,
            grid_size: c.alpha_grid_size,
        }
    }
}

/// A model fitted from a [`MethodSpec`] with the hyperparameters it ended up using.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: FittedModel,
    pub alpha1: Option<f64>,
    pub lambda: Option<f64>,
    pub trace: Vec<(usize, Vec<f64>)>,
}

/// Fits one configured method the way the experiment runner does: tunes
/// what the spec leaves open, then trains on `train`.
pub fn fit_method_spec(
    spec: &MethodSpec,
    train: &Dataset,
    law: &ConditionalLaw,
    tuning: Tuning,
    rng_seed: u64,
) -> Result<Fitted> {
    let mut tuner = Tuner::default();
    let fit_seed = seed::derive(rng_seed, &[seed::tag::FIT]);
    let tune_seed = seed::derive(rng_seed, &[seed::tag::TUNING]);
    fit_method(tuning, spec, train, law, fit_seed, tune_seed, &mut tuner)
}

fn fit_method(
    tuning: Tuning,
    spec: &MethodSpec,
    train: &Dataset,
    law: &ConditionalLaw,
    method_seed: u64,
    tune_seed: u64,
    tuner: &mut Tuner,
) -> Result<Fitted> {
    match spec.model {
        ModelKind::Lasso | ModelKind::ElasticNet => {
            let cv = tuner.linear(tuning, spec, train, tune_seed)?;
            let solver = spec.solver_config(cv.alpha1);
            let (model, report, lambda) = if spec.mrd {
                let lambda = spec.lambda.unwrap_or_else(|| auto_lambda(cv.mse_validation));
                let mrd = MrdConfig {
                    subset_size: spec.subset_size,
                    ..MrdConfig::new(lambda)
                };
                let (m, r) = fit_mrd_elastic_net(train, &solver, &mrd, law, method_seed)?;
                (m, r, Some(lambda))
            } else {
                let (m, r) = fit_elastic_net_admm(train, &solver)?;
                (m, r, None)
            };
            Ok(Fitted {
                model: FittedModel::Linear(model),
                alpha1: Some(cv.alpha1),
                lambda,
                trace: report.trace,
            })
        }
        ModelKind::Mlp => {
            let mc = spec.mlp_config();
            if spec.mrd {
                let lambda = match spec.lambda {
                    Some(l) => l,
                    None => auto_lambda(tuner.mlp(spec, train, tune_seed)?),
                };
                let mrd = MrdConfig {
                    subset_size: spec.subset_size,
                    ..MrdConfig::new(lambda)
                };
                let (m, _) = fit_mrd_mlp(train, &mc, &mrd, law, method_seed)?;
                Ok(Fitted {
                    model: FittedModel::Mlp(m),
                    alpha1: None,
                    lambda: Some(lambda),
                    trace: Vec::new(),
                })
            } else {
                let (m, _) = fit_mlp(train, &mc, method_seed)?;
                Ok(Fitted {
                    model: FittedModel::Mlp(m),
                    alpha1: None,
                    lambda: None,
                    trace: Vec::new(),
                })
            }
        }
    }
}

fn run_method(
    cfg: &ExperimentConfig,
    t: usize,
    spec: &MethodSpec,
    method_seed: u64,
    data: &TrialData,
    law: &ConditionalLaw,
    tuner: &mut Tuner,
) -> Result<MethodOutcome> {
    let label = spec.label();
    // tuning depends only on the trial so base and penalized methods share it
    let tune_seed = seed::derive(cfg.base_seed, &[seed::tag::TRIAL, t as u64, seed::tag::TUNING]);
    let test_seed = seed::derive(method_seed, &[seed::tag::HRT]);
    let (fitted, report, rmse) = match cfg.test {
        TestSpec::Hrt { k } => {
            let fitted = fit_method(cfg.into(), spec, &data.train, law, method_seed, tune_seed, tuner)?;
            let pred = fitted.model.predict(&data.test.x)?;
            let y_std = standardization_y_std(&fitted.model);
            let rmse = ((pred - &data.test.y).norm_squared() / data.test.n() as f64).sqrt() / y_std;
            let report = hrt_pvalues(&fitted.model, &data.test, law, &HrtConfig::new(k, test_seed))?;
            (fitted, report, rmse)
        }
        TestSpec::CvHrt { k, folds } => {
            // penalty and weight are tuned once on all data, then reused per fold
            let fitted = fit_method(cfg.into(), spec, &data.all, law, method_seed, tune_seed, tuner)?;
            let mut fixed = spec.clone();
            fixed.alpha1 = fitted.alpha1;
            fixed.lambda = fitted.lambda;
            fixed.trace_every = None;
            let fit_fn = |train: &Dataset, s: u64| -> Result<FittedModel> {
                let mut local = Tuner::default();
                Ok(fit_method(cfg.into(), &fixed, train, law, s, s, &mut local)?.model)
            };
            let report = cv_hrt_pvalues(&data.all, fit_fn, law, folds, &HrtConfig::new(k, test_seed))?;
            let y = &data.all.y;
            let mean = y.mean();
            let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
            let rmse = report.t_star.sqrt() / sd;
            (fitted, report, rmse)
        }
    };

    let truth = &data.truth.nonnull;
    let selection = select(cfg.selection.method, &report.pvalues, cfg.selection.q);
    let selected: BTreeSet<usize> = selection.rejected.iter().map(|&c| report.features[c]).collect();
    let sel = crate::selection::SelectionResult {
        rejected: selected,
        ..selection
    }
    .with_truth(truth);
    let (h1, h0) = split_by_truth(&report.rd_hat, &report.features, truth);

    let mut trajectory = Vec::new();
    if let (FittedModel::Linear(m), TestSpec::Hrt { .. }) = (&fitted.model, &cfg.test) {
        for (iter, beta) in &fitted.trace {
            let snap = LinearModel {
                beta: beta.clone(),
                ..m.clone()
            };
            let rd = empirical_rd(
                &snap,
                &data.test,
                law,
                cfg.trace_dummies,
                seed::derive(method_seed, &[seed::tag::HRT, *iter as u64]),
            )?;
            let all: Vec<usize> = (0..rd.len()).collect();
            let (a, b) = split_by_truth(&rd, &all, truth);
            trajectory.push(TrajectoryRow {
                trial: t,
                method: label.clone(),
                iteration: *iter,
                h1_q25: quantile(&a, 0.25),
                h1_q50: quantile(&a, 0.5),
                h1_q75: quantile(&a, 0.75),
                h0_q75: quantile(&b, 0.75),
            });
        }
    }

    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    let record = TrialRecord {
        trial: t,
        method: label.clone(),
        rmse: Some(rmse),
        fdp: sel.fdp,
        power: sel.power,
        num_rejected: Some(sel.rejected.len()),
        alpha1: fitted.alpha1,
        lambda: fitted.lambda,
        pvalues_file: format!("pvalues_{t}_{label}.csv"),
        rd_h1_q25: finite(quantile(&h1, 0.25)),
        rd_h1_q50: finite(quantile(&h1, 0.5)),
        rd_h1_q75: finite(quantile(&h1, 0.75)),
        rd_h0_q75: finite(quantile(&h0, 0.75)),
        error: None,
    };
    Ok(MethodOutcome {
        record,
        report: Some(report),
        trajectory,
    })
}

fn standardization_y_std(model: &FittedModel) -> f64 {
    match model {
        FittedModel::Linear(m) => m.standardization.y_std,
        FittedModel::Mlp(m) => m.standardization.y_std,
    }
}

/// Mean covariance goodness-of-fit statistic over `features`, one dummy draw
/// per feature from `law` on the rows of `x`.
pub fn mean_covariance_gof(law: &ConditionalLaw, x: &DMatrix<f64>, features: &[usize], rng_seed: u64) -> Result<f64> {
    let cols = law.prepare(x, features)?;
    let mut total = 0.0;
    for (col, &j) in cols.iter().zip(features) {
        let dummy = col.draw(&mut seed::rng(rng_seed, &[seed::tag::DUMMIES, j as u64]));
        total += crate::sampler::covariance_gof(x, &dummy, j)?;
    }
    Ok(total / features.len().max(1) as f64)
}

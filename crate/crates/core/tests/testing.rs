mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use hrt_core::data::{split_train_test, Dataset, StandardizationParams};
use hrt_core::datagen::{gen_design, gen_response, DesignSpec, ResponseModel, ResponseSpec};
use hrt_core::linalg::ar1_covariance;
use hrt_core::regression::{
    fit_elastic_net_admm, fit_mlp, ElasticNetConfig, FittedModel, LinearModel, MlpConfig, Predictor,
};
use hrt_core::sampler::{ConditionalLaw, GaussianModel, LawSource};
use hrt_core::seed;
use hrt_core::testing::{
    cv_hrt_pvalues, empirical_rd, hrt_pvalues, load_pvalues_csv, pvalue, single_hypothesis_test,
    squared_error_stat, HrtConfig,
};
use hrt_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use common::mc_bound;

fn identity_law(d: usize) -> ConditionalLaw {
    ConditionalLaw::gaussian(
        GaussianModel::new(vec![0.0; d], DMatrix::identity(d, d)).unwrap(),
        LawSource::True,
    )
    .unwrap()
}

fn raw_linear(beta: Vec<f64>) -> LinearModel {
    let d = beta.len();
    LinearModel {
        beta,
        intercept: 0.0,
        standardization: StandardizationParams::identity(d),
    }
}

fn fixture(n: usize, d: usize, c: f64, s: u64) -> (Dataset, ConditionalLaw, Vec<usize>) {
    let spec = DesignSpec::ar1(0.25, n, d, s);
    let x = gen_design(&spec).unwrap();
    let mut resp = ResponseSpec::new(ResponseModel::M1, c, s + 1);
    resp.sparsity = 0.4;
    let truth = resp.ground_truth(d).unwrap();
    let y = gen_response(&x, &resp, &truth).unwrap();
    let nulls = (0..d).filter(|j| !truth.nonnull.contains(j)).collect();
    (Dataset::new(x, y).unwrap(), spec.true_law().unwrap(), nulls)
}

#[test]
fn rd_matches_hand_expansion_on_two_samples() {
    // X = [[1, 2], [3, -1]], y = [1, 4], beta = (2, -1): residuals (1, -3), z = 5.
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -1.0]);
    let test = Dataset::new(x, DVector::from_vec(vec![1.0, 4.0])).unwrap();
    let model = raw_linear(vec![2.0, -1.0]);
    let law = identity_law(2);
    let k = 3;
    let s = 17;
    let report = hrt_pvalues(&model, &test, &law, &HrtConfig::new(k, s)).unwrap();
    assert_eq!(report.t_star, 5.0);
    // Under the identity law the dummy for feature j in replicate r is the
    // standard normal pair drawn from the (seed, j, r) stream.
    for j in 0..2 {
        let mut expected = 0.0;
        for r in 0..k {
            let mut rng = seed::rng(s, &[seed::tag::HRT, j as u64, r as u64]);
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let z_tilde = if j == 0 {
                // predictions (2a - 2, 2b + 1)
                ((1.0 - (2.0 * a - 2.0)).powi(2) + (4.0 - (2.0 * b + 1.0)).powi(2)) / 2.0
            } else {
                // predictions (2 - a, 6 - b)
                ((1.0 - (2.0 - a)).powi(2) + (4.0 - (6.0 - b)).powi(2)) / 2.0
            };
            assert!((report.dummy_stats[j][r] - z_tilde).abs() < 1e-12);
            expected += (z_tilde - 5.0) / k as f64;
        }
        assert!((report.rd_hat[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn dead_coefficient_has_zero_rd_and_unit_pvalue() {
    let (data, law, _) = fixture(60, 4, 1.0, 3);
    let model = raw_linear(vec![1.0, 0.0, -0.5, 0.0]);
    let report = hrt_pvalues(&model, &data, &law, &HrtConfig::new(50, 1)).unwrap();
    for j in [1, 3] {
        assert_eq!(report.rd_hat[j], 0.0);
        assert_eq!(report.pvalues[j], 1.0);
    }
    assert_eq!(empirical_rd(&model, &data, &law, 20, 1).unwrap()[1], 0.0);
}

#[test]
fn identical_swap_leaves_predictions_unchanged() {
    let (data, _, _) = fixture(50, 5, 1.0, 4);
    let (lin, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(0.01)).unwrap();
    let (mlp, _) = fit_mlp(&data, &MlpConfig { epochs: 5, ..MlpConfig::default() }, 2).unwrap();
    for model in [&lin as &dyn Predictor, &mlp as &dyn Predictor] {
        let ev = model.swap_evaluator(&data.x).unwrap();
        let mut out = vec![0.0; data.n()];
        for j in 0..data.d() {
            ev.predict_swapped(j, data.x.column(j).as_slice(), &mut out);
            assert_eq!(out.as_slice(), ev.base());
        }
    }
}

#[test]
fn floor_and_boundary_rejection() {
    // y = x0 exactly and the model is exact, so every swap of x0 raises the error.
    let x = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
    let y = x.column(0).into_owned();
    let data = Dataset::new(x, y).unwrap();
    let model = raw_linear(vec![1.0, 0.0, 0.0]);
    let law = identity_law(3);
    let (p, reject) = single_hypothesis_test(&model, &data, &law, 0, 19, 0.05, 5).unwrap();
    assert_eq!(p, 1.0 / 20.0);
    assert!(reject);
    let (p, reject) = single_hypothesis_test(&model, &data, &law, 1, 19, 0.05, 5).unwrap();
    assert_eq!(p, 1.0);
    assert!(!reject);
}

#[test]
fn mean_statistic_matches_direct_loop() {
    let (data, law, _) = fixture(30, 4, 1.0, 6);
    let (model, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(0.02)).unwrap();
    let mut total = 0.0;
    for i in 0..data.n() {
        let row: Vec<f64> = data.x.row(i).iter().copied().collect();
        total += squared_error_stat(&model, &row, data.y[i]).unwrap();
    }
    let report = hrt_pvalues(&model, &data, &law, &HrtConfig::new(5, 0)).unwrap();
    assert!((report.t_star - total / data.n() as f64).abs() < 1e-12);
    for (j, stats) in report.dummy_stats.iter().enumerate() {
        assert_eq!(report.pvalues[j], pvalue(report.t_star, stats));
        let mean = stats.iter().sum::<f64>() / stats.len() as f64;
        assert!((report.rd_hat[j] - (mean - report.t_star)).abs() < 1e-12);
    }
}

#[test]
fn reports_are_deterministic_and_model_is_untouched() {
    let (data, law, _) = fixture(80, 6, 1.0, 7);
    let (model, _) = fit_mlp(&data, &MlpConfig { epochs: 5, ..MlpConfig::default() }, 3).unwrap();
    let fitted = FittedModel::Mlp(model);
    let before = fitted.to_json().unwrap();
    let cfg = HrtConfig::new(40, 11);
    let a = hrt_pvalues(fitted.as_predictor(), &data, &law, &cfg).unwrap();
    let b = hrt_pvalues(fitted.as_predictor(), &data, &law, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(fitted.to_json().unwrap(), before);
    let other = hrt_pvalues(fitted.as_predictor(), &data, &law, &HrtConfig::new(40, 12)).unwrap();
    assert_ne!(a.dummy_stats, other.dummy_stats);
}

#[test]
fn feature_subset_matches_full_run() {
    let (data, law, _) = fixture(50, 5, 1.0, 8);
    let (model, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(0.01)).unwrap();
    let full = hrt_pvalues(&model, &data, &law, &HrtConfig::new(30, 2)).unwrap();
    let cfg = HrtConfig {
        k: 30,
        feature_subset: Some(vec![3, 1]),
        seed: 2,
    };
    let part = hrt_pvalues(&model, &data, &law, &cfg).unwrap();
    assert_eq!(part.features, vec![3, 1]);
    assert_eq!(part.pvalues, vec![full.pvalues[3], full.pvalues[1]]);
    let bad = HrtConfig {
        k: 30,
        feature_subset: Some(vec![9]),
        seed: 2,
    };
    assert!(hrt_pvalues(&model, &data, &law, &bad).is_err());
}

#[test]
fn csv_round_trip_is_one_based() {
    let (data, law, _) = fixture(40, 3, 1.0, 9);
    let (model, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(0.01)).unwrap();
    let report = hrt_pvalues(&model, &data, &law, &HrtConfig::new(9, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("feature,pvalue,t_star,rd_hat\n1,"));
    let (features, pvalues) = load_pvalues_csv(&path).unwrap();
    assert_eq!(features, vec![0, 1, 2]);
    assert_eq!(pvalues, report.pvalues);
}

#[test]
fn null_pvalues_are_super_uniform() {
    let reps = 500;
    let k = 99;
    let pvals: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let (data, law, nulls) = fixture(200, 10, 0.5, seed::derive(31, &[r]));
            let split = split_train_test(200, 0.5, r).unwrap();
            let (train, test) = (data.subset(&split.train), data.subset(&split.test));
            let (model, _) = fit_elastic_net_admm(&train, &ElasticNetConfig::lasso(0.02)).unwrap();
            single_hypothesis_test(&model, &test, &law, nulls[0], k, 0.1, seed::derive(32, &[r]))
                .unwrap()
                .0
        })
        .collect();
    for &p in &pvals {
        let c = p * (k + 1) as f64;
        assert!((c - c.round()).abs() < 1e-9 && c.round() >= 1.0);
    }
    for alpha in [0.05, 0.1, 0.2] {
        let rate = pvals.iter().filter(|&&p| p <= alpha).count() as f64 / reps as f64;
        assert!(rate <= mc_bound(alpha, reps), "alpha {alpha}: rate {rate}");
    }
}

#[test]
fn cv_hrt_fits_one_model_per_fold_and_scores_each_sample_once() {
    let (data, law, _) = fixture(80, 5, 1.0, 10);
    let calls = AtomicUsize::new(0);
    let sizes = std::sync::Mutex::new(Vec::new());
    let fit = |train: &Dataset, _s: u64| {
        calls.fetch_add(1, Ordering::SeqCst);
        sizes.lock().unwrap().push(train.n());
        fit_elastic_net_admm(train, &ElasticNetConfig::lasso(0.02)).map(|(m, _)| m)
    };
    let report = cv_hrt_pvalues(&data, fit, &law, 8, &HrtConfig::new(50, 3)).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 8);
    // each fold holds out 10 samples
    assert!(sizes.lock().unwrap().iter().all(|&n| n == 70));
    assert_eq!(report.pvalues.len(), 5);
    for &p in &report.pvalues {
        let c = p * 51.0;
        assert!((c - c.round()).abs() < 1e-9 && (1.0..=51.0).contains(&c.round()));
    }
    let again = cv_hrt_pvalues(&data, fit, &law, 8, &HrtConfig::new(50, 3)).unwrap();
    assert_eq!(report, again);
}

#[test]
fn cv_hrt_t_star_pools_held_out_errors() {
    let (data, law, _) = fixture(40, 3, 1.0, 12);
    let fit = |train: &Dataset, _s: u64| fit_elastic_net_admm(train, &ElasticNetConfig::lasso(0.02)).map(|(m, _)| m);
    let cfg = HrtConfig::new(5, 4);
    let report = cv_hrt_pvalues(&data, fit, &law, 4, &cfg).unwrap();
    let folds = hrt_core::data::kfold_indices(40, 4, seed::derive(4, &[seed::tag::FOLDS])).unwrap();
    let mut total = 0.0;
    let mut seen = vec![0; 40];
    for f in 0..4 {
        let model = fit(&data.subset(&folds.complement(f)), 0).unwrap();
        for i in folds.members(f) {
            seen[i] += 1;
            let row: Vec<f64> = data.x.row(i).iter().copied().collect();
            total += squared_error_stat(&model, &row, data.y[i]).unwrap();
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert!((report.t_star - total / 40.0).abs() < 1e-12);
}

#[test]
fn cv_hrt_null_calibration() {
    let reps = 300;
    let k = 50;
    let pvals: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let (data, law, nulls) = fixture(80, 5, 0.5, seed::derive(41, &[r]));
            let fit = |train: &Dataset, _s: u64| fit_elastic_net_admm(train, &ElasticNetConfig::lasso(0.02)).map(|(m, _)| m);
            let cfg = HrtConfig {
                k,
                feature_subset: Some(vec![nulls[0]]),
                seed: seed::derive(42, &[r]),
            };
            cv_hrt_pvalues(&data, fit, &law, 8, &cfg).unwrap().pvalues[0]
        })
        .collect();
    for alpha in [0.05, 0.1, 0.2] {
        let rate = pvals.iter().filter(|&&p| p <= alpha).count() as f64 / reps as f64;
        assert!(rate <= mc_bound(alpha, reps), "alpha {alpha}: rate {rate}");
    }
}

#[test]
fn cv_hrt_rejects_single_fold() {
    let (data, law, _) = fixture(20, 3, 1.0, 13);
    let fit = |train: &Dataset, _s: u64| fit_elastic_net_admm(train, &ElasticNetConfig::lasso(0.02)).map(|(m, _)| m);
    let err = cv_hrt_pvalues(&data, fit, &law, 1, &HrtConfig::new(5, 0)).unwrap_err();
    assert!(matches!(err, Error::InvalidK { .. }));
}

#[test]
fn misspecified_law_still_runs() {
    let (data, _, _) = fixture(60, 4, 1.0, 14);
    let (model, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(0.01)).unwrap();
    let law = ConditionalLaw::gaussian(
        GaussianModel::new(vec![0.0; 4], ar1_covariance(4, 0.9)).unwrap(),
        LawSource::Fitted,
    )
    .unwrap();
    let report = hrt_pvalues(&model, &data, &law, &HrtConfig::new(20, 0)).unwrap();
    assert!(report.pvalues.iter().all(|p| (0.0..=1.0).contains(p)));
}

mod common;

use hrt_core::data::{kfold_indices, split_train_test, Dataset, StandardizationParams};
use hrt_core::datagen::{gen_design, gen_response, DesignSpec, ResponseModel, ResponseSpec};
use hrt_core::regression::{
    alpha_grid, cv_tune_penalty, fit_elastic_net_admm, fit_mlp, fit_mrd_elastic_net, fit_mrd_mlp,
    predict, solve_admm, validation_mse_mlp, ElasticNetConfig, MlpConfig, MrdConfig, Predictor,
};
use hrt_core::seed;
use nalgebra::DVector;

use common::{coordinate_descent, enet_objective, gaussian_matrix};

fn m2_data(n: usize, d: usize, c: f64, s: u64) -> (Dataset, DesignSpec) {
    let spec = DesignSpec::ar1(0.25, n, d, s);
    let x = gen_design(&spec).unwrap();
    let resp = ResponseSpec::new(ResponseModel::M2, c, s + 1);
    let truth = resp.ground_truth(d).unwrap();
    let y = gen_response(&x, &resp, &truth).unwrap();
    (Dataset::new(x, y).unwrap(), spec)
}

fn linear_data(n: usize, d: usize, signal: f64, s: u64) -> Dataset {
    let x = gaussian_matrix(n, d, s);
    let noise = gaussian_matrix(n, 1, s + 1);
    let y = DVector::from_fn(n, |i, _| signal * (x[(i, 0)] - x[(i, 1)]) + noise[(i, 0)]);
    Dataset::new(x, y).unwrap()
}

fn rmse(model: &dyn Predictor, test: &Dataset, y_std: f64) -> f64 {
    let pred = predict(model, &test.x).unwrap();
    ((pred - &test.y).norm_squared() / test.n() as f64).sqrt() / y_std
}

#[test]
fn lasso_matches_coordinate_descent() {
    let data = linear_data(200, 50, 1.0, 3);
    let p = StandardizationParams::fit(&data.x, &data.y).unwrap();
    let (xs, ys) = (p.apply_x(&data.x), p.apply_y(&data.y));
    let a1 = 0.05;
    let r = solve_admm(&xs, &ys, &ElasticNetConfig::lasso(a1), None).unwrap();
    assert!(r.converged);
    let f_admm = enet_objective(&xs, &ys, &r.state.beta, a1, 0.0);
    let f_cd = enet_objective(&xs, &ys, &coordinate_descent(&xs, &ys, a1, 0.0), a1, 0.0);
    assert!((f_admm - f_cd).abs() / f_cd < 1e-4, "{f_admm} vs {f_cd}");
}

#[test]
fn singleton_grid_returns_its_value_and_fold_mse() {
    let data = linear_data(60, 5, 1.0, 4);
    let template = ElasticNetConfig::lasso(0.0);
    let cv = cv_tune_penalty(&data, &[0.05], 5, &template, 9).unwrap();
    assert_eq!(cv.alpha1, 0.05);
    // recompute the held-out error directly
    let folds = kfold_indices(60, 5, seed::derive(9, &[seed::tag::FOLDS])).unwrap();
    let mut total = 0.0;
    for f in 0..5 {
        let train = data.subset(&folds.complement(f));
        let test = data.subset(&folds.members(f));
        let (model, _) = fit_elastic_net_admm(&train, &ElasticNetConfig::lasso(0.05)).unwrap();
        let sd = model.standardization.y_std;
        let pred = predict(&model, &test.x).unwrap();
        total += (pred - &test.y).norm_squared() / (test.n() as f64 * sd * sd);
    }
    assert!((cv.mse_validation - total / 5.0).abs() < 1e-9);
}

#[test]
fn pure_noise_validation_mse_near_one() {
    let data = linear_data(300, 10, 0.0, 5);
    let grid = alpha_grid(&data, 20).unwrap();
    let cv = cv_tune_penalty(&data, &grid, 5, &ElasticNetConfig::lasso(0.0), 1).unwrap();
    assert!((cv.mse_validation - 1.0).abs() < 0.15, "{}", cv.mse_validation);
}

#[test]
fn strong_signal_selects_small_penalty() {
    let data = linear_data(200, 10, 3.0, 6);
    let grid = alpha_grid(&data, 20).unwrap();
    let cv = cv_tune_penalty(&data, &grid, 5, &ElasticNetConfig::lasso(0.0), 1).unwrap();
    assert!(cv.alpha1 < grid[0]);
    assert!(cv.mse_validation < 1.0);
    assert_eq!(cv.curve.len(), grid.len());
}

#[test]
fn penalty_at_grid_top_zeroes_the_fit() {
    let data = linear_data(100, 8, 1.0, 7);
    let grid = alpha_grid(&data, 5).unwrap();
    let (model, _) = fit_elastic_net_admm(&data, &ElasticNetConfig::lasso(grid[0] * 1.0001)).unwrap();
    assert!(model.beta.iter().all(|&b| b == 0.0));
}

#[test]
fn mlp_learns_m2_signal() {
    let (data, _) = m2_data(800, 20, 0.5, 8);
    let split = split_train_test(800, 0.5, 1).unwrap();
    let (train, test) = (data.subset(&split.train), data.subset(&split.test));
    let (model, report) = fit_mlp(&train, &MlpConfig::default(), 2).unwrap();
    let e = rmse(&model, &test, model.standardization.y_std);
    assert!(e < 1.0, "test rmse {e}");
    assert!(report.losses.last().unwrap() < &report.losses[0]);
    let (first, last) = report.grad_norm_windows(10).unwrap();
    assert!(last < first, "gradient norm window {first} -> {last}");
}

#[test]
fn mlp_inference_is_deterministic() {
    let (data, _) = m2_data(100, 6, 0.5, 9);
    let (model, _) = fit_mlp(&data, &MlpConfig { epochs: 10, ..MlpConfig::default() }, 1).unwrap();
    let a = predict(&model, &data.x).unwrap();
    let b = predict(&model, &data.x).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    assert!(model.params.gates().iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn mlp_validation_mse_is_relative_to_response_variance() {
    let (data, _) = m2_data(300, 8, 0.0, 10);
    let v = validation_mse_mlp(&data, &MlpConfig { epochs: 20, ..MlpConfig::default() }, 1).unwrap();
    assert!(v > 0.7 && v < 1.6, "{v}");
}

#[test]
fn mrd_fits_are_seeded() {
    let (data, spec) = m2_data(200, 10, 0.5, 11);
    let law = spec.true_law().unwrap();
    let cfg = ElasticNetConfig::lasso(0.02);
    let mrd = MrdConfig::new(0.5);
    let (a, _) = fit_mrd_elastic_net(&data, &cfg, &mrd, &law, 1).unwrap();
    let (b, _) = fit_mrd_elastic_net(&data, &cfg, &mrd, &law, 1).unwrap();
    let (c, _) = fit_mrd_elastic_net(&data, &cfg, &mrd, &law, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.beta, c.beta);

    let mcfg = MlpConfig { epochs: 5, ..MlpConfig::default() };
    let (m1, _) = fit_mrd_mlp(&data, &mcfg, &mrd, &law, 3).unwrap();
    let (m2, _) = fit_mrd_mlp(&data, &mcfg, &mrd, &law, 3).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn mrd_rejects_bad_settings() {
    let (data, spec) = m2_data(50, 5, 0.5, 12);
    let law = spec.true_law().unwrap();
    let cfg = ElasticNetConfig::lasso(0.02);
    assert!(fit_mrd_elastic_net(&data, &cfg, &MrdConfig::new(1.0), &law, 0).is_err());
    let too_many = MrdConfig {
        subset_size: Some(6),
        ..MrdConfig::new(0.5)
    };
    assert!(fit_mrd_elastic_net(&data, &cfg, &too_many, &law, 0).is_err());
    let wrong_law = DesignSpec::ar1(0.25, 10, 4, 0).true_law().unwrap();
    assert!(fit_mrd_elastic_net(&data, &cfg, &MrdConfig::new(0.5), &wrong_law, 0).is_err());
    assert!(fit_mrd_mlp(&data, &MlpConfig::default(), &MrdConfig::new(1.0), &law, 0).is_err());
}

#[test]
fn mrd_subset_and_fixed_dummies_run() {
    let (data, spec) = m2_data(120, 8, 0.5, 13);
    let law = spec.true_law().unwrap();
    let mrd = MrdConfig {
        subset_size: Some(3),
        resample_each_iter: false,
        ..MrdConfig::new(0.4)
    };
    let (model, report) = fit_mrd_elastic_net(&data, &ElasticNetConfig::lasso(0.02), &mrd, &law, 5).unwrap();
    assert!(report.iterations >= 1);
    assert!(model.beta.iter().all(|b| b.is_finite()));
}

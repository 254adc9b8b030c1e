//! Elastic net by ADMM with the splitting `beta = v`: the smooth part (least
//! squares plus the optional risk-discrepancy penalty) is minimized over `v`
//! by gradient descent, the elastic-net penalty over `beta` in closed form.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::prox::prox_elastic_net;
use super::{sigmoid, LinearModel, MrdConfig};
use crate::data::{Dataset, StandardizationParams};
use crate::error::{Error, Result};
use crate::sampler::{ConditionalLaw, PreparedColumn};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetConfig {
    pub alpha1: f64,
    #[serde(default)]
    pub alpha2: f64,
    #[serde(default = "defaults::rho")]
    pub admm_rho: f64,
    #[serde(default = "defaults::eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "defaults::eps_abs")]
    pub eps_abs: f64,
    #[serde(default = "defaults::max_iter")]
    pub max_iter: usize,
    #[serde(default = "defaults::inner_steps")]
    pub inner_gd_steps: usize,
    #[serde(default = "defaults::inner_lr")]
    pub inner_lr: f64,
    /// Record `beta` every this many iterations (for discrepancy trajectories).
    #[serde(default)]
    pub trace_every: Option<usize>,
    /// With a discrepancy weight `lambda > 0`, multiply both elastic-net
    /// weights by `1 - lambda` so the penalty keeps its balance against the
    /// down-weighted data term. When false the prox uses `alpha1`, `alpha2` as given.
    #[serde(default = "defaults::yes")]
    pub scale_penalty_by_data_weight: bool,
}

mod defaults {
    pub fn rho() -> f64 {
        1.0
    }
    pub fn eps_rel() -> f64 {
        1e-3
    }
    pub fn eps_abs() -> f64 {
        5e-4
    }
    pub fn max_iter() -> usize {
        2000
    }
    pub fn inner_steps() -> usize {
        50
    }
    pub fn inner_lr() -> f64 {
        0.05
    }
    pub fn yes() -> bool {
        true
    }
}

impl ElasticNetConfig {
    pub fn lasso(alpha1: f64) -> Self {
        Self::elastic_net(alpha1, 0.0)
    }

    pub fn elastic_net(alpha1: f64, alpha2: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            admm_rho: defaults::rho(),
            eps_rel: defaults::eps_rel(),
            eps_abs: defaults::eps_abs(),
            max_iter: defaults::max_iter(),
            inner_gd_steps: defaults::inner_steps(),
            inner_lr: defaults::inner_lr(),
            trace_every: None,
            scale_penalty_by_data_weight: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
            && self.admm_rho > 0.0
            && self.eps_rel > 0.0
            && self.eps_abs > 0.0
            && self.max_iter >= 1
            && self.inner_lr > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid elastic net config {self:?}")))
        }
    }
}

/// ADMM iterates; pass back in to warm-start a related problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub beta: DVector<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
}

impl AdmmState {
    pub fn zeros(d: usize) -> Self {
        Self {
            beta: DVector::zeros(d),
            v: DVector::zeros(d),
            u: DVector::zeros(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmReport {
    pub iterations: usize,
    /// False when `max_iter` was hit before the residual test passed; the
    /// iterate with the smallest scaled residual is returned instead.
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub state: AdmmState,
    /// `(iteration, beta)` snapshots when tracing is enabled.
    pub trace: Vec<(usize, Vec<f64>)>,
}

/// Risk-discrepancy penalty of a linear model for one batch of dummies, in
/// closed form. With residual `r = y - X v` and `delta_j = X~_j - X_j`, the
/// dummy-swapped risk is `z~_j = z - 2 v_j mean(r delta_j) + v_j^2 mean(delta_j^2)`,
/// so only `Delta' X / m`, `Delta' y / m` and `mean(delta_j^2)` are needed.
#[derive(Debug, Clone)]
pub struct LinearMrdTerm {
    subset: Vec<usize>,
    delta_x: DMatrix<f64>,
    delta_y: Vec<f64>,
    delta_sq: Vec<f64>,
}

impl LinearMrdTerm {
    /// `deltas` holds one column `X~_j - X_j` per entry of `subset`.
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, subset: Vec<usize>, deltas: &DMatrix<f64>) -> Self {
        let m = x.nrows() as f64;
        let delta_x = deltas.transpose() * x / m;
        let delta_y = (deltas.transpose() * y / m).as_slice().to_vec();
        let delta_sq = deltas.column_iter().map(|c| c.norm_squared() / m).collect();
        Self {
            subset,
            delta_x,
            delta_y,
            delta_sq,
        }
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// `z~_j - z` for every feature in the subset.
    pub fn risk_gaps(&self, v: &DVector<f64>) -> Vec<f64> {
        let av = &self.delta_x * v;
        self.subset
            .iter()
            .enumerate()
            .map(|(c, &j)| {
                let a = self.delta_y[c] - av[c];
                -2.0 * v[j] * a + v[j] * v[j] * self.delta_sq[c]
            })
            .collect()
    }

    /// Per-feature penalties `sigmoid(z - z~_j)`.
    pub fn penalties(&self, v: &DVector<f64>) -> Vec<f64> {
        self.risk_gaps(v).into_iter().map(|g| sigmoid(-g)).collect()
    }

    /// Mean penalty over the subset.
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        let p = self.penalties(v);
        p.iter().sum::<f64>() / p.len() as f64
    }

    /// Gradient of [`Self::value`].
    pub fn grad(&self, v: &DVector<f64>) -> DVector<f64> {
        let av = &self.delta_x * v;
        let scale = 1.0 / self.subset.len() as f64;
        // weights w_c = dD_c/d(gap_c) / |P|
        let mut w = DVector::zeros(self.subset.len());
        let mut grad = DVector::zeros(v.len());
        for (c, &j) in self.subset.iter().enumerate() {
            let a = self.delta_y[c] - av[c];
            let gap = -2.0 * v[j] * a + v[j] * v[j] * self.delta_sq[c];
            let d = sigmoid(-gap);
            let wc = -d * (1.0 - d) * scale;
            w[c] = wc * 2.0 * v[j];
            grad[j] += wc * (2.0 * v[j] * self.delta_sq[c] - 2.0 * a);
        }
        grad += self.delta_x.transpose() * w;
        grad
    }
}

/// Source of fresh dummy batches during MRD training.
pub(crate) struct DummySource<'a> {
    pub columns: &'a [PreparedColumn],
    pub x: &'a DMatrix<f64>,
    pub subset_size: usize,
    pub resample: bool,
    pub seed: u64,
}

impl DummySource<'_> {
    /// Subset and dummy-minus-original columns for step `step`.
    pub fn batch(&self, step: usize) -> (Vec<usize>, DMatrix<f64>) {
        let d = self.x.ncols();
        let step = if self.resample { step } else { 0 } as u64;
        let subset: Vec<usize> = if self.subset_size == d {
            (0..d).collect()
        } else {
            let mut rng = seed::rng(self.seed, &[seed::tag::SUBSET, step]);
            let mut s = index::sample(&mut rng, d, self.subset_size).into_vec();
            s.sort_unstable();
            s
        };
        let m = self.x.nrows();
        let mut deltas = DMatrix::zeros(m, subset.len());
        for (c, &j) in subset.iter().enumerate() {
            let mut rng = seed::rng(self.seed, &[seed::tag::DUMMIES, step, j as u64]);
            let col = deltas.column_mut(c);
            let out = col.data.into_slice_mut();
            self.columns[j].draw_into(&mut rng, out);
            for (i, o) in out.iter_mut().enumerate() {
                *o -= self.x[(i, j)];
            }
        }
        (subset, deltas)
    }
}

pub(crate) struct MrdParts<'a> {
    pub lambda: f64,
    pub source: DummySource<'a>,
}

/// Runs ADMM on standardized `(x, y)`.
///
/// Each iteration optionally draws a dummy batch, takes `inner_gd_steps`
/// gradient steps on
/// `(1 - lambda)/(2m) |X v - y|^2 + lambda * penalty(v) + (rho/2)|v - beta + u|^2`,
/// applies the elastic-net prox to `v + u` with threshold `alpha1 / rho`
/// (times `1 - lambda` when `scale_penalty_by_data_weight` is set),
/// and updates the scaled dual. Stops on the primal/dual residual rule
/// `|v - beta| <= sqrt(d) eps_abs + eps_rel max(|v|, |beta|)` and
/// `rho |beta - beta_prev| <= sqrt(d) eps_abs + eps_rel rho |u|`.
pub fn solve_admm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ElasticNetConfig,
    warm: Option<&AdmmState>,
) -> Result<AdmmReport> {
    solve_admm_inner(x, y, cfg, None, warm)
}

pub(crate) fn solve_admm_inner(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ElasticNetConfig,
    mrd: Option<&MrdParts<'_>>,
    warm: Option<&AdmmState>,
) -> Result<AdmmReport> {
    cfg.validate()?;
    let (m, d) = x.shape();
    if y.len() != m {
        return Err(Error::shape("response length differs from row count"));
    }
    let mf = m as f64;
    let gram = x.transpose() * x / mf;
    let xty = x.transpose() * y / mf;
    let rho = cfg.admm_rho;
    let lambda = mrd.map_or(0.0, |p| p.lambda);
    let data_w = 1.0 - lambda;
    let pen_w = if cfg.scale_penalty_by_data_weight { data_w } else { 1.0 };
    let (tau, ridge) = (pen_w * cfg.alpha1 / rho, pen_w * cfg.alpha2 / rho);
    let sqrt_d = (d as f64).sqrt();

    let mut state = warm.cloned().unwrap_or_else(|| AdmmState::zeros(d));
    if state.beta.len() != d {
        return Err(Error::shape("warm start has the wrong dimension"));
    }
    let mut trace = Vec::new();
    let mut term: Option<LinearMrdTerm> = None;
    let (mut r_norm, mut s_norm) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut iterations = 0;
    // (scaled residual, iteration, state) of the iterate closest to stopping
    let mut best: Option<(f64, usize, AdmmState, f64, f64)> = None;

    for k in 0..cfg.max_iter {
        iterations = k + 1;
        if let Some(parts) = mrd {
            if term.is_none() || parts.source.resample {
                let (subset, deltas) = parts.source.batch(k);
                term = Some(LinearMrdTerm::new(x, y, subset, &deltas));
            }
        }
        let anchor = &state.beta - &state.u;
        for _ in 0..cfg.inner_gd_steps {
            let mut grad = (&gram * &state.v - &xty) * data_w + (&state.v - &anchor) * rho;
            if let Some(t) = &term {
                grad += t.grad(&state.v) * lambda;
            }
            state.v -= grad * cfg.inner_lr;
        }
        let beta_prev = state.beta.clone();
        let shifted = &state.v + &state.u;
        state.beta = DVector::from_vec(prox_elastic_net(shifted.as_slice(), tau, ridge));
        state.u += &state.v - &state.beta;

        if state.v.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: k,
                detail: "ADMM iterate diverged; lower inner_lr".into(),
            });
        }
        r_norm = (&state.v - &state.beta).norm();
        s_norm = rho * (&state.beta - &beta_prev).norm();
        let eps_pri = sqrt_d * cfg.eps_abs + cfg.eps_rel * state.v.norm().max(state.beta.norm());
        let eps_dual = sqrt_d * cfg.eps_abs + cfg.eps_rel * rho * state.u.norm();
        if let Some(every) = cfg.trace_every {
            if every > 0 && k % every == 0 {
                trace.push((k, state.beta.as_slice().to_vec()));
            }
        }
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
        let score = (r_norm / eps_pri).max(s_norm / eps_dual);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, k, state.clone(), r_norm, s_norm));
        }
    }
    if !converged {
        let msg = format!("ADMM stopped at max_iter = {} (r = {r_norm:.3e}, s = {s_norm:.3e})", cfg.max_iter);
        if mrd.is_some_and(|p| p.source.resample) {
            // fresh dummies every iteration keep the residuals at a noise floor
            debug!("{msg}");
        } else {
            warn!("{msg}");
        }
        if let Some((_, _, b, r, s)) = best {
            state = b;
            r_norm = r;
            s_norm = s;
        }
    }
    if cfg.trace_every.is_some() {
        trace.push((iterations, state.beta.as_slice().to_vec()));
    }
    Ok(AdmmReport {
        iterations,
        converged,
        primal_residual: r_norm,
        dual_residual: s_norm,
        state,
        trace,
    })
}

fn linear_model(report: &AdmmReport, params: StandardizationParams) -> LinearModel {
    LinearModel {
        beta: report.state.beta.as_slice().to_vec(),
        intercept: 0.0,
        standardization: params,
    }
}

/// Standardizes `data` with its own statistics and fits the elastic net.
pub fn fit_elastic_net_admm(data: &Dataset, cfg: &ElasticNetConfig) -> Result<(LinearModel, AdmmReport)> {
    let params = StandardizationParams::fit(&data.x, &data.y)?;
    let xs = params.apply_x(&data.x);
    let ys = params.apply_y(&data.y);
    let report = solve_admm(&xs, &ys, cfg, None)?;
    Ok((linear_model(&report, params), report))
}

/// Elastic net with the risk-discrepancy penalty. Dummies come from `law`
/// (on the raw feature scale) mapped into the standardized coordinates the
/// solver works in; a fresh batch is drawn every ADMM iteration.
pub fn fit_mrd_elastic_net(
    data: &Dataset,
    cfg: &ElasticNetConfig,
    mrd: &MrdConfig,
    law: &ConditionalLaw,
    rng_seed: u64,
) -> Result<(LinearModel, AdmmReport)> {
    let d = data.d();
    mrd.validate(d)?;
    if law.d() != d {
        return Err(Error::shape(format!("law has d = {}, data has {d}", law.d())));
    }
    let params = StandardizationParams::fit(&data.x, &data.y)?;
    let xs = params.apply_x(&data.x);
    let ys = params.apply_y(&data.y);
    let law_std = law.standardized(&params)?;
    let all: Vec<usize> = (0..d).collect();
    let columns = law_std.prepare(&xs, &all)?;
    let parts = MrdParts {
        lambda: mrd.lambda,
        source: DummySource {
            columns: &columns,
            x: &xs,
            subset_size: mrd.subset_size.unwrap_or(d),
            resample: mrd.resample_each_iter,
            seed: seed::derive(rng_seed, &[seed::tag::FIT]),
        },
    };
    let report = solve_admm_inner(&xs, &ys, cfg, Some(&parts), None)?;
    Ok((linear_model(&report, params), report))
}

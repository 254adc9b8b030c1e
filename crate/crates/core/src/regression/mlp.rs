//! Two-layer network with an input gate: `f(x) = w2 . relu(W1 (x * sigmoid(g)) + b1) + b2`,
//! trained full-batch by Adam with dropout on the hidden layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::admm::DummySource;
use super::{check_cols, sigmoid, MrdConfig, Predictor, SwapEvaluator};
use crate::data::{Dataset, StandardizationParams};
use crate::error::{Error, Result};
use crate::sampler::ConditionalLaw;
use crate::seed;

/// Initial gate logit; `sigmoid(4) ~ 0.982` so every feature starts open.
const GATE_INIT: f64 = 4.0;
/// Default cap on features receiving dummies per step.
const MLP_SUBSET_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout_rate: f64,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::cancelout")]
    pub cancelout_weight: f64,
    #[serde(default = "defaults::betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// One optimizer step per epoch on the whole training set. When false,
    /// each epoch walks shuffled mini-batches of `batch_size` rows.
    #[serde(default = "defaults::full_batch")]
    pub full_batch: bool,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

mod defaults {
    pub fn hidden() -> usize {
        16
    }
    pub fn dropout() -> f64 {
        0.5
    }
    pub fn lr() -> f64 {
        0.005
    }
    pub fn epochs() -> usize {
        60
    }
    pub fn cancelout() -> f64 {
        0.02
    }
    pub fn betas() -> (f64, f64) {
        (0.9, 0.999)
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn full_batch() -> bool {
        true
    }
    pub fn batch_size() -> usize {
        64
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_dim: defaults::hidden(),
            dropout_rate: defaults::dropout(),
            learning_rate: defaults::lr(),
            epochs: defaults::epochs(),
            cancelout_weight: defaults::cancelout(),
            adam_betas: defaults::betas(),
            adam_eps: defaults::adam_eps(),
            full_batch: defaults::full_batch(),
            batch_size: defaults::batch_size(),
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        let ok = self.hidden_dim >= 1
            && (0.0..1.0).contains(&self.dropout_rate)
            && self.learning_rate > 0.0
            && self.cancelout_weight >= 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.adam_eps > 0.0
            && (self.full_batch || self.batch_size >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid MLP config {self:?}")))
        }
    }
}

/// Flat parameter vector with layout `[gate (d) | W1 (h x d, column-major) | b1 (h) | w2 (h) | b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub d: usize,
    pub hidden: usize,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn len_for(d: usize, h: usize) -> usize {
        d + h * d + 2 * h + 1
    }

    /// Gate logits at `GATE_INIT`; linear layers uniform on `+-1/sqrt(fan_in)`.
    pub fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut theta = Vec::with_capacity(Self::len_for(d, hidden));
        theta.extend(std::iter::repeat_n(GATE_INIT, d));
        let b = 1.0 / (d as f64).sqrt();
        theta.extend((0..hidden * d + hidden).map(|_| rng.random_range(-b..b)));
        let b = 1.0 / (hidden as f64).sqrt();
        theta.extend((0..hidden + 1).map(|_| rng.random_range(-b..b)));
        Self { d, hidden, theta }
    }

    pub fn gate_logits(&self) -> &[f64] {
        &self.theta[..self.d]
    }

    /// Gate activations `sigmoid(g)`.
    pub fn gates(&self) -> Vec<f64> {
        self.gate_logits().iter().map(|&g| sigmoid(g)).collect()
    }

    fn w1(&self) -> DMatrix<f64> {
        let o = self.d;
        DMatrix::from_column_slice(self.hidden, self.d, &self.theta[o..o + self.hidden * self.d])
    }

    fn b1(&self) -> &[f64] {
        let o = self.d + self.hidden * self.d;
        &self.theta[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.d + self.hidden * self.d + self.hidden;
        &self.theta[o..o + self.hidden]
    }

    fn b2(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }
}

/// Trained network plus the standardization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub params: MlpParams,
    pub standardization: StandardizationParams,
}

#[derive(Debug, Clone, Default)]
pub struct MlpReport {
    /// Objective value at every optimizer step (with that step's dropout mask).
    pub losses: Vec<f64>,
    /// Euclidean norm of the gradient at every step.
    pub grad_norms: Vec<f64>,
}

impl MlpReport {
    /// Mean gradient norm over the first and last `window` steps.
    pub fn grad_norm_windows(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.grad_norms.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.grad_norms[..window]), mean(&self.grad_norms[n - window..])))
    }
}

/// Dummy values for a feature subset, in the standardized coordinates the
/// network sees. Column `c` of `values` replaces feature `subset[c]`.
#[derive(Debug, Clone)]
pub struct MrdBatch {
    pub subset: Vec<usize>,
    pub values: DMatrix<f64>,
}

struct Forward {
    xg: DMatrix<f64>,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
    out: DVector<f64>,
}

fn forward(p: &MlpParams, x: &DMatrix<f64>, gates: &[f64], w1: &DMatrix<f64>, mask: Option<&DMatrix<f64>>) -> Forward {
    let mut xg = x.clone();
    for (j, mut col) in xg.column_iter_mut().enumerate() {
        col *= gates[j];
    }
    let mut pre = &xg * w1.transpose();
    let b1 = p.b1();
    for (k, mut col) in pre.column_iter_mut().enumerate() {
        col.add_scalar_mut(b1[k]);
    }
    forward_from_pre(p, xg, pre, mask)
}

fn forward_from_pre(p: &MlpParams, xg: DMatrix<f64>, pre: DMatrix<f64>, mask: Option<&DMatrix<f64>>) -> Forward {
    let mut act = pre.map(|v| v.max(0.0));
    if let Some(m) = mask {
        act.component_mul_assign(m);
    }
    let out = &act * DVector::from_column_slice(p.w2()) + DVector::from_element(act.nrows(), p.b2());
    Forward { xg, pre, act, out }
}

/// Mean squared error of one pass and its gradient with respect to `theta`,
/// accumulated as `scale * grad` into `acc`.
fn mse_backward(
    p: &MlpParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    gates: &[f64],
    w1: &DMatrix<f64>,
    f: &Forward,
    mask: Option<&DMatrix<f64>>,
    scale: f64,
    acc: &mut [f64],
) {
    let (m, d) = x.shape();
    let h = p.hidden;
    let dout = (&f.out - y) * (2.0 / m as f64);
    let w2 = p.w2();
    let mut dpre = DMatrix::zeros(m, h);
    for k in 0..h {
        for i in 0..m {
            if f.pre[(i, k)] > 0.0 {
                let mk = mask.map_or(1.0, |mm| mm[(i, k)]);
                dpre[(i, k)] = dout[i] * w2[k] * mk;
            }
        }
    }
    let dw1 = dpre.transpose() * &f.xg;
    let dxg = &dpre * w1;
    let ow1 = d;
    let ob1 = d + h * d;
    let ow2 = ob1 + h;
    for j in 0..d {
        let dg: f64 = dxg.column(j).dot(&x.column(j));
        acc[j] += scale * dg * gates[j] * (1.0 - gates[j]);
    }
    for (t, v) in dw1.iter().enumerate() {
        acc[ow1 + t] += scale * v;
    }
    for k in 0..h {
        acc[ob1 + k] += scale * dpre.column(k).sum();
        acc[ow2 + k] += scale * f.act.column(k).dot(&dout);
    }
    acc[ow2 + h] += scale * dout.sum();
}

/// Training objective and its gradient for a fixed dropout mask and a fixed
/// dummy batch:
/// `(1 - lambda) (mse + cw mean(gates)) + lambda / |P| sum_j sigmoid(z - z~_j)`
/// where `z~_j` is the mse with feature `j` swapped for its dummy.
pub fn mlp_objective(
    params: &MlpParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    mask: Option<&DMatrix<f64>>,
    cancelout_weight: f64,
    mrd: Option<(&MrdBatch, f64)>,
) -> (f64, Vec<f64>) {
    let d = params.d;
    let gates = params.gates();
    let w1 = params.w1();
    let mut grad = vec![0.0; params.theta.len()];
    let f = forward(params, x, &gates, &w1, mask);
    let z = (&f.out - y).norm_squared() / x.nrows() as f64;
    let lambda = mrd.map_or(0.0, |(_, l)| l);
    let data_w = 1.0 - lambda;
    let reg = gates.iter().sum::<f64>() / d as f64;
    let mut value = data_w * (z + cancelout_weight * reg);
    for j in 0..d {
        grad[j] += data_w * cancelout_weight * gates[j] * (1.0 - gates[j]) / d as f64;
    }

    let mut z_weight = data_w;
    if let Some((batch, lambda)) = mrd {
        let np = batch.subset.len() as f64;
        for (c, &j) in batch.subset.iter().enumerate() {
            let (xs, fs) = swapped_forward(params, x, &f, &gates, &w1, mask, j, batch.values.column(c).as_slice());
            let zs = (&fs.out - y).norm_squared() / x.nrows() as f64;
            let pen = sigmoid(z - zs);
            value += lambda / np * pen;
            let w = lambda / np * pen * (1.0 - pen);
            z_weight += w;
            mse_backward(params, &xs, y, &gates, &w1, &fs, mask, -w, &mut grad);
        }
    }
    mse_backward(params, x, y, &gates, &w1, &f, mask, z_weight, &mut grad);
    (value, grad)
}

/// Forward pass with column `j` of `x` replaced, reusing the base pass.
#[allow(clippy::too_many_arguments)]
fn swapped_forward(
    p: &MlpParams,
    x: &DMatrix<f64>,
    base: &Forward,
    gates: &[f64],
    w1: &DMatrix<f64>,
    mask: Option<&DMatrix<f64>>,
    j: usize,
    col: &[f64],
) -> (DMatrix<f64>, Forward) {
    let mut xs = x.clone();
    xs.column_mut(j).copy_from_slice(col);
    let mut xg = base.xg.clone();
    let mut pre = base.pre.clone();
    for i in 0..x.nrows() {
        let delta = gates[j] * (col[i] - x[(i, j)]);
        xg[(i, j)] = gates[j] * col[i];
        for k in 0..p.hidden {
            pre[(i, k)] += w1[(k, j)] * delta;
        }
    }
    (xs, forward_from_pre(p, xg, pre, mask))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &MlpConfig) {
        let (b1, b2) = cfg.adam_betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] -= cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

fn dropout_mask(m: usize, h: usize, rate: f64, rng: &mut impl Rng) -> Option<DMatrix<f64>> {
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(DMatrix::from_fn(m, h, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep }))
}

fn train(
    data: &Dataset,
    cfg: &MlpConfig,
    rng_seed: u64,
    mrd: Option<(&MrdConfig, &ConditionalLaw)>,
) -> Result<(MlpModel, MlpReport)> {
    cfg.validate()?;
    let d = data.d();
    let params = StandardizationParams::fit(&data.x, &data.y)?;
    let xs = params.apply_x(&data.x);
    let ys = params.apply_y(&data.y);
    let m = xs.nrows();
    let mut net = MlpParams::init(d, cfg.hidden_dim, &mut seed::rng(rng_seed, &[seed::tag::MODEL, seed::tag::INIT]));

    let columns = match mrd {
        Some((mc, law)) => {
            mc.validate(d)?;
            if law.d() != d {
                return Err(Error::shape(format!("law has d = {}, data has {d}", law.d())));
            }
            let all: Vec<usize> = (0..d).collect();
            Some(law.standardized(&params)?.prepare(&xs, &all)?)
        }
        None => None,
    };

    let batch_size = if cfg.full_batch { m } else { cfg.batch_size.min(m) };
    let mut order: Vec<usize> = (0..m).collect();
    let mut adam = Adam::new(net.theta.len());
    let mut report = MlpReport::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        if batch_size < m {
            order.shuffle(&mut seed::rng(rng_seed, &[seed::tag::MODEL, seed::tag::SPLIT, epoch as u64]));
        }
        for chunk in order.chunks(batch_size) {
            let (bx, by) = if batch_size < m {
                (xs.select_rows(chunk), ys.select_rows(chunk))
            } else {
                (xs.clone(), ys.clone())
            };
            let mut drng = seed::rng(rng_seed, &[seed::tag::MODEL, seed::tag::DROPOUT, step as u64]);
            let mask = dropout_mask(bx.nrows(), cfg.hidden_dim, cfg.dropout_rate, &mut drng);
            let batch = match (mrd, &columns) {
                (Some((mc, _)), Some(cols)) => {
                    let source = DummySource {
                        columns: cols,
                        x: &xs,
                        subset_size: mc.subset_size.unwrap_or(d.min(MLP_SUBSET_CAP)),
                        resample: mc.resample_each_iter,
                        seed: seed::derive(rng_seed, &[seed::tag::MODEL, seed::tag::FIT]),
                    };
                    let (subset, deltas) = source.batch(step);
                    let mut values = DMatrix::zeros(bx.nrows(), subset.len());
                    for (c, &j) in subset.iter().enumerate() {
                        for (r, &i) in chunk.iter().enumerate() {
                            values[(r, c)] = xs[(i, j)] + deltas[(i, c)];
                        }
                    }
                    Some((MrdBatch { subset, values }, mc.lambda))
                }
                _ => None,
            };
            let (loss, grad) = mlp_objective(
                &net,
                &bx,
                &by,
                mask.as_ref(),
                cfg.cancelout_weight,
                batch.as_ref().map(|(b, l)| (b, *l)),
            );
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss = {loss}, |grad| = {gnorm}; lower learning_rate"),
                });
            }
            report.losses.push(loss);
            report.grad_norms.push(gnorm);
            adam.step(&mut net.theta, &grad, cfg);
            step += 1;
        }
    }
    Ok((
        MlpModel {
            params: net,
            standardization: params,
        },
        report,
    ))
}

/// Fits the network on `data`, standardized with its own statistics.
pub fn fit_mlp(data: &Dataset, cfg: &MlpConfig, rng_seed: u64) -> Result<(MlpModel, MlpReport)> {
    train(data, cfg, rng_seed, None)
}

/// Fits the network with the risk-discrepancy penalty. Every step draws a
/// feature subset (default `min(d, 32)` features) and fresh dummies for it;
/// all swapped passes share the step's dropout mask.
pub fn fit_mrd_mlp(
    data: &Dataset,
    cfg: &MlpConfig,
    mrd: &MrdConfig,
    law: &ConditionalLaw,
    rng_seed: u64,
) -> Result<(MlpModel, MlpReport)> {
    train(data, cfg, rng_seed, Some((mrd, law)))
}

impl MlpModel {
    fn hidden_pre(&self, xs: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, Forward) {
        let gates = self.params.gates();
        let w1 = self.params.w1();
        let f = forward(&self.params, xs, &gates, &w1, None);
        (gates, w1, f)
    }

    fn output_to_raw(&self, out: &DVector<f64>) -> DVector<f64> {
        self.standardization.invert_y(out)
    }
}

impl Predictor for MlpModel {
    fn d(&self) -> usize {
        self.params.d
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_cols(x, self.d())?;
        let xs = self.standardization.apply_x(x);
        let (_, _, f) = self.hidden_pre(&xs);
        Ok(self.output_to_raw(&f.out))
    }

    fn swap_evaluator<'a>(&'a self, x: &'a DMatrix<f64>) -> Result<Box<dyn SwapEvaluator + 'a>> {
        check_cols(x, self.d())?;
        let xs = self.standardization.apply_x(x);
        let (gates, w1, f) = self.hidden_pre(&xs);
        let mut ev = MlpSwap {
            model: self,
            x,
            gates,
            w1,
            pre: f.pre,
            base: Vec::new(),
        };
        // Same arithmetic as a swap with a zero shift, so an identical swap
        // reproduces the base predictions exactly.
        ev.base = (0..x.nrows()).map(|i| ev.output_at(i, 0, 0.0)).collect();
        Ok(Box::new(ev))
    }
}

/// Swapping one input column shifts every hidden pre-activation by
/// `W1[:, j] * gate_j * (new - old) / std_j`; only the output layer is recomputed.
struct MlpSwap<'a> {
    model: &'a MlpModel,
    x: &'a DMatrix<f64>,
    gates: Vec<f64>,
    w1: DMatrix<f64>,
    pre: DMatrix<f64>,
    base: Vec<f64>,
}

impl MlpSwap<'_> {
    /// Raw-scale output at row `i` with the gated standardized input `j`
    /// shifted by `delta`.
    fn output_at(&self, i: usize, j: usize, delta: f64) -> f64 {
        let p = &self.model.params;
        let st = &self.model.standardization;
        let w2 = p.w2();
        let mut o = p.b2();
        for k in 0..p.hidden {
            o += w2[k] * (self.pre[(i, k)] + self.w1[(k, j)] * delta).max(0.0);
        }
        st.y_mean + st.y_std * o
    }
}

impl SwapEvaluator for MlpSwap<'_> {
    fn base(&self) -> &[f64] {
        &self.base
    }

    fn predict_swapped(&self, j: usize, col: &[f64], out: &mut [f64]) {
        let factor = self.gates[j] / self.model.standardization.feature_stds[j];
        for i in 0..out.len() {
            out[i] = self.output_at(i, j, factor * (col[i] - self.x[(i, j)]));
        }
    }
}

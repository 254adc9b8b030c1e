#![allow(dead_code)]

use std::collections::BTreeSet;

use hrt_core::seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(m: usize, d: usize, s: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(s, &[0xfeed]);
    DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `(1/2m)|X b - y|^2 + a1 |b|_1 + (a2/2)|b|^2`.
pub fn enet_objective(x: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>, a1: f64, a2: f64) -> f64 {
    let m = x.nrows() as f64;
    (x * b - y).norm_squared() / (2.0 * m) + a1 * b.abs().sum() + 0.5 * a2 * b.norm_squared()
}

/// Cyclic coordinate descent for the same objective, run to a tight tolerance.
pub fn coordinate_descent(x: &DMatrix<f64>, y: &DVector<f64>, a1: f64, a2: f64) -> DVector<f64> {
    let (m, d) = x.shape();
    let mf = m as f64;
    let col_sq: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared() / mf).collect();
    let mut b = DVector::zeros(d);
    let mut r = y.clone();
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for j in 0..d {
            let old = b[j];
            let rho = x.column(j).dot(&r) / mf + col_sq[j] * old;
            let new = if rho > a1 {
                (rho - a1) / (col_sq[j] + a2)
            } else if rho < -a1 {
                (rho + a1) / (col_sq[j] + a2)
            } else {
                0.0
            };
            if new != old {
                r.axpy(old - new, &x.column(j), 1.0);
                b[j] = new;
                delta = delta.max((new - old).abs());
            }
        }
        if delta < 1e-13 {
            break;
        }
    }
    b
}

/// Largest `r` with `#{p <= r q / d} >= r`; rejects every p-value at or below `r q / d`.
pub fn brute_force_step_up(p: &[f64], level: f64) -> BTreeSet<usize> {
    let d = p.len();
    for r in (1..=d).rev() {
        let t = r as f64 * level / d as f64;
        let set: BTreeSet<usize> = (0..d).filter(|&i| p[i] <= t).collect();
        if set.len() >= r {
            return set;
        }
    }
    BTreeSet::new()
}

pub fn harmonic(d: usize) -> f64 {
    (1..=d).map(|k| 1.0 / k as f64).sum()
}

/// Minimizes a 1-D convex function on `[lo, hi]` by grid search then golden section.
pub fn minimize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 2000;
    let step = (hi - lo) / n as f64;
    let mut best = lo;
    for i in 0..=n {
        let x = lo + step * i as f64;
        if f(x) < f(best) {
            best = x;
        }
    }
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if f(c) <= f(e) {
            b = e;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Monte Carlo allowance: `alpha + 3 sqrt(alpha (1 - alpha) / reps)`.
pub fn mc_bound(alpha: f64, reps: usize) -> f64 {
    alpha + 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt()
}

/// `S_tau(x) = max(0, x - tau) - max(0, -x - tau)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    (x - tau).max(0.0) - (-x - tau).max(0.0)
}

/// Proximal map of `tau |b| + (alpha2 / 2) b^2` under `(1/2)(v - b)^2`,
/// applied elementwise: soft-threshold, then shrink by `1 / (1 + alpha2)`.
pub fn prox_elastic_net(v: &[f64], tau: f64, alpha2: f64) -> Vec<f64> {
    let shrink = 1.0 / (1.0 + alpha2);
    v.iter().map(|&x| shrink * soft_threshold(x, tau)).collect()
}

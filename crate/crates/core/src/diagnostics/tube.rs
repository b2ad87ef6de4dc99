//! Tube stability: how far noisy inner rollouts stray from the deterministic
//! path, and how often they leave an `r`-tube around it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{inner_rollout, Backbone};
use crate::error::{Error, Result};
use crate::proposal::{trajectory_sampler, NoiseConfig};
use crate::rng::{unit_direction, RngStream};
use crate::state::{JointState, LatentTensor};

/// Unit-direction probes per point.
pub const DEFAULT_PROBES: usize = 16;

/// Largest secant ratio `|f(x + y + z_m + r u) - f(x + y + z_m)| / r` over
/// `n_probes` random unit directions `u` at each point `z_m`.
pub fn empirical_lipschitz(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    y: &LatentTensor,
    points: &[LatentTensor],
    r: f64,
    n_probes: usize,
    stream: &RngStream,
) -> f64 {
    assert!(r > 0.0, "probe radius must be positive");
    let xy = x.add(y);
    let mut rng = stream.rng();
    let mut worst: f64 = 0.0;
    for z in points {
        let base_in = xy.add(z);
        let base = backbone.apply(&base_in);
        for _ in 0..n_probes {
            let u = unit_direction(&mut rng, base_in.len());
            let u = LatentTensor::from_raw(u, base_in.rows(), base_in.dim());
            let moved = backbone.apply(&base_in.add_scaled(r, &u));
            let ratio = moved.distance(&base) / r;
            // overflow shows up as NaN, which f64::max would swallow
            worst = if ratio.is_nan() { f64::INFINITY } else { worst.max(ratio) };
        }
    }
    worst
}

/// `sigma^2 nu^2 sum_{j<m} rho^{2j}`.
pub fn pre_exit_bound(sigma: f64, nu_sq: f64, rho: f64, m: usize) -> f64 {
    let geometric: f64 = (0..m).map(|j| rho.powi(2 * j as i32)).sum();
    sigma * sigma * nu_sq * geometric
}

/// `(M / r^2) sigma^2 nu^2 / (1 - rho^2)`; infinite when `rho >= 1`.
pub fn exit_bound(sigma: f64, nu_sq: f64, rho: f64, inner_steps: usize, r: f64) -> f64 {
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    inner_steps as f64 / (r * r) * sigma * sigma * nu_sq / (1.0 - rho * rho)
}

/// First-exit step: smallest `m` (1-based) with `|e_m| > r`, or `M + 1`.
pub fn first_exit(deviation_sq: &[f64], r: f64) -> usize {
    deviation_sq
        .iter()
        .position(|&d| d > r * r)
        .map_or(deviation_sq.len() + 1, |i| i + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub alpha: f64,
    pub r: f64,
    /// `E[|e_m|^2 1{tau_r > m}]` for `m = 1..M`, with standard errors.
    pub in_tube_second_moment: Vec<f64>,
    pub in_tube_se: Vec<f64>,
    /// The same, divided by `r^2`.
    pub normalized: Vec<f64>,
    /// `P(tau_r > M)` and its standard error.
    pub survival: f64,
    pub survival_se: f64,
    /// Local Lipschitz estimate on this tube, when a backbone was probed.
    pub rho_hat: Option<f64>,
    /// Bounds at `rho_hat`; absent when `rho_hat >= 1` or unknown.
    pub pre_exit_bound: Option<Vec<f64>>,
    pub exit_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeReport {
    pub sigma: f64,
    pub inner_steps: usize,
    /// `nu^2 = E|xi|^2`.
    pub nu_sq: f64,
    pub rollouts: usize,
    pub radii: Vec<RadiusReport>,
}

/// Summarizes per-rollout squared deviations `|e_m|^2` (each of length `M`).
/// `rho_hat` is looked up per radius.
pub fn summarize_deviations(
    deviations: &[Vec<f64>],
    alphas: &[f64],
    len: usize,
    sigma: f64,
    inner_steps: usize,
    rho_hat: impl Fn(f64) -> Option<f64>,
) -> TubeReport {
    let n = deviations.len();
    let nu_sq = len as f64;
    let radii = alphas
        .iter()
        .map(|&alpha| {
            let r = alpha * nu_sq.sqrt();
            let mut sum = vec![0.0; inner_steps];
            let mut sum_sq = vec![0.0; inner_steps];
            let mut survived = 0usize;
            for d in deviations {
                let tau = first_exit(d, r);
                if tau > inner_steps {
                    survived += 1;
                }
                for m in 0..inner_steps.min(d.len()) {
                    // tau_r > m with m 1-based
                    if tau > m + 1 {
                        sum[m] += d[m];
                        sum_sq[m] += d[m] * d[m];
                    }
                }
            }
            let nf = n.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
            let se: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(s2, mu)| {
                    if n < 2 {
                        0.0
                    } else {
                        ((s2 - nf * mu * mu).max(0.0) / (nf - 1.0) / nf).sqrt()
                    }
                })
                .collect();
            let survival = if n == 0 { 1.0 } else { survived as f64 / nf };
            let rho = rho_hat(r);
            let applicable = rho.filter(|&p| p < 1.0);
            RadiusReport {
                alpha,
                r,
                normalized: mean.iter().map(|v| v / (r * r)).collect(),
                in_tube_second_moment: mean,
                in_tube_se: se,
                survival,
                survival_se: (survival * (1.0 - survival) / nf).sqrt(),
                rho_hat: rho,
                pre_exit_bound: applicable
                    .map(|p| (1..=inner_steps).map(|m| pre_exit_bound(sigma, nu_sq, p, m)).collect()),
                exit_bound: applicable.map(|p| exit_bound(sigma, nu_sq, p, inner_steps, r)),
            }
        })
        .collect();
    TubeReport {
        sigma,
        inner_steps,
        nu_sq,
        rollouts: n,
        radii,
    }
}

/// Runs one deterministic and `n_rollouts` noisy inner rollouts from `h`
/// and tabulates deviations for each `r = alpha sqrt(L D)`.
#[allow(clippy::too_many_arguments)]
pub fn tube_statistics(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    h: &JointState,
    inner_steps: usize,
    sigma: f64,
    alphas: &[f64],
    n_rollouts: usize,
    stream: &RngStream,
) -> Result<TubeReport> {
    if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::config("tube multipliers must be positive"));
    }
    let noise = NoiseConfig::gaussian(sigma)?;
    let det = inner_rollout(backbone, x, h, inner_steps)?;
    let deviations = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let s = stream.with_id(stream.id.instance, i as u64, stream.id.step);
            let t = trajectory_sampler(backbone, x, h, inner_steps, &noise, &s)?;
            Ok(t.inner.iter().zip(&det).map(|(a, b)| a.sub(b).norm_sq()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut points = vec![h.z.clone()];
    points.extend(det);
    let probe = stream.with_id(stream.id.instance, crate::rng::PROBE_TAG, stream.id.step);
    let rho = |r: f64| Some(empirical_lipschitz(backbone, x, &h.y, &points, r, DEFAULT_PROBES, &probe));
    Ok(summarize_deviations(&deviations, alphas, x.len(), sigma, inner_steps, rho))
}

//! Guide alignment: class-conditional score gaps, the label-free spread
//! bound, and exact tilt identities on finite measures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::state::normalize_log_weights;

/// Points on `[0, beta]` used for suprema over the tilt parameter.
pub const TILT_GRID_POINTS: usize = 64;
/// Step of the centered finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Weighted mean score of successes minus that of failures. `None` when
/// either class carries no weight.
pub fn class_conditional_gap(scores: &[f64], success: &[bool], weights: &[f64]) -> Option<f64> {
    let (mut ws, mut wf, mut ss, mut sf) = (0.0, 0.0, 0.0, 0.0);
    for ((&q, &ok), &w) in scores.iter().zip(success).zip(weights) {
        if ok {
            ws += w;
            ss += w * q;
        } else {
            wf += w;
            sf += w * q;
        }
    }
    (ws > 0.0 && wf > 0.0).then(|| ss / ws - sf / wf)
}

/// `weights` are normalized here; they need not sum to one.
pub fn weighted_std(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut live = values.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(v, _)| v);
    let first = live.next();
    if total <= 0.0 || live.all(|v| Some(v) == first) {
        return 0.0;
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    var.max(0.0).sqrt()
}

/// Weights `w_s exp(t q_s)`, normalized.
pub fn tilt(weights: &[f64], scores: &[f64], t: f64) -> Vec<f64> {
    let logs: Vec<f64> = weights
        .iter()
        .zip(scores)
        .map(|(w, q)| if *w > 0.0 { w.ln() + t * q } else { f64::NEG_INFINITY })
        .collect();
    normalize_log_weights(&logs)
        .map(|l| l.into_iter().map(f64::exp).collect())
        .unwrap_or_else(|_| vec![0.0; weights.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadBound {
    /// `(beta / 2) sup_t std_t(q)`.
    pub bound: f64,
    pub grid: Vec<f64>,
    pub spread: Vec<f64>,
}

/// Tilts `weights` by `t q` for `t` on a uniform `grid_points` grid over
/// `[0, beta]` and records the weighted spread of `q`.
pub fn q_spread_bound(scores: &[f64], weights: &[f64], beta: f64, grid_points: usize) -> SpreadBound {
    let k = grid_points.max(2);
    let grid: Vec<f64> = (0..k).map(|i| beta * i as f64 / (k - 1) as f64).collect();
    let spread: Vec<f64> = grid
        .iter()
        .map(|&t| weighted_std(scores, &tilt(weights, scores, t)))
        .collect();
    let sup = spread.iter().cloned().fold(0.0, f64::max);
    SpreadBound {
        bound: 0.5 * beta * sup,
        grid,
        spread,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub phi: f64,
    /// Guide score, `<= 0`.
    pub q: f64,
    pub p: f64,
}

/// A finite measure on which the tilted law is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

impl IdentityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            gap: (lhs - rhs).abs(),
        }
    }
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::config("a measure needs at least one atom"));
        }
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        if atoms.iter().any(|a| !(a.p >= 0.0 && a.phi.is_finite() && a.q.is_finite() && a.q <= 0.0))
            || (total - 1.0).abs() > 1e-12
        {
            return Err(Error::config("atoms need p >= 0 summing to 1, finite phi and q <= 0"));
        }
        Ok(Self { atoms })
    }

    /// Random measure with `n` atoms: Dirichlet(1) masses, scores
    /// `log u` for uniform `u`, and `phi` either standard normal or binary.
    pub fn random(n: usize, binary_phi: bool, stream: &RngStream) -> Result<Self> {
        let mut rng = stream.rng();
        let mut raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|v| *v /= total);
        let atoms = raw
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let q = rng.random_range(0.01f64..1.0).ln();
                let phi = if binary_phi {
                    // both classes always present
                    match i {
                        0 => 1.0,
                        1 => 0.0,
                        _ => f64::from(rng.random_bool(0.5) as u8),
                    }
                } else {
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
                };
                Atom { phi, q, p }
            })
            .collect();
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    fn scores(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.q).collect()
    }

    /// Probabilities of `pi_t`, proportional to `p exp(t q)`.
    pub fn tilted(&self, t: f64) -> Vec<f64> {
        let p: Vec<f64> = self.atoms.iter().map(|a| a.p).collect();
        tilt(&p, &self.scores(), t)
    }

    pub fn expectation(&self, t: f64) -> f64 {
        self.tilted(t).iter().zip(&self.atoms).map(|(w, a)| w * a.phi).sum()
    }

    /// `Cov_t(phi, q)`.
    pub fn covariance(&self, t: f64) -> f64 {
        let w = self.tilted(t);
        let mp: f64 = w.iter().zip(&self.atoms).map(|(w, a)| w * a.phi).sum();
        let mq: f64 = w.iter().zip(&self.atoms).map(|(w, a)| w * a.q).sum();
        w.iter()
            .zip(&self.atoms)
            .map(|(w, a)| w * (a.phi - mp) * (a.q - mq))
            .sum()
    }

    /// `std_t(q)`.
    pub fn spread(&self, t: f64) -> f64 {
        weighted_std(&self.scores(), &self.tilted(t))
    }

    /// Mass on atoms with `phi != 0`.
    pub fn success_mass(&self, t: f64) -> f64 {
        self.tilted(t)
            .iter()
            .zip(&self.atoms)
            .filter(|(_, a)| a.phi != 0.0)
            .map(|(w, _)| w)
            .sum()
    }

    /// `E_t[q | phi != 0] - E_t[q | phi = 0]`.
    pub fn gap(&self, t: f64) -> Option<f64> {
        let success: Vec<bool> = self.atoms.iter().map(|a| a.phi != 0.0).collect();
        class_conditional_gap(&self.scores(), &success, &self.tilted(t))
    }

    /// Spread bound for the move from `0` to `beta`.
    pub fn spread_bound(&self, beta: f64) -> SpreadBound {
        let p: Vec<f64> = self.atoms.iter().map(|a| a.p).collect();
        q_spread_bound(&self.scores(), &p, beta, TILT_GRID_POINTS)
    }
}

/// Finite-difference `d/dt E_t[phi]` against the exact `Cov_t(phi, q)`.
pub fn tilt_identity_check(measure: &DiscreteMeasure, t: f64) -> IdentityCheck {
    let lhs = (measure.expectation(t + FD_STEP) - measure.expectation(t - FD_STEP)) / (2.0 * FD_STEP);
    IdentityCheck::new(lhs, measure.covariance(t))
}

/// Finite-difference `d/dt log(p / (1 - p))` against `Delta(t)` for binary
/// `phi`. `None` when `p` leaves `(0, 1)` on the stencil.
pub fn log_odds_identity_check(measure: &DiscreteMeasure, t: f64) -> Option<IdentityCheck> {
    let log_odds = |s: f64| {
        let p = measure.success_mass(s);
        (p > 0.0 && p < 1.0).then(|| (p / (1.0 - p)).ln())
    };
    let hi = log_odds(t + FD_STEP)?;
    let lo = log_odds(t - FD_STEP)?;
    log_odds(t)?;
    let delta = measure.gap(t)?;
    Some(IdentityCheck::new((hi - lo) / (2.0 * FD_STEP), delta))
}

/// Law of the success probability `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaDistribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl EtaDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EtaDistribution::Constant { value } => value,
            EtaDistribution::Uniform { low, high } => rng.random_range(low..high),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub covariance: f64,
    pub standard_error: f64,
}

impl CovarianceEstimate {
    /// Estimate in standard-error units; zero when the estimate is exact.
    pub fn z_score(&self) -> f64 {
        if self.standard_error > 0.0 {
            self.covariance / self.standard_error
        } else {
            0.0
        }
    }
}

/// Monte-Carlo `Cov(Y, psi(eta))` with `Y ~ Bernoulli(eta)`.
pub fn bce_alignment_check(
    eta: EtaDistribution,
    psi: impl Fn(f64) -> f64,
    n_samples: usize,
    stream: &RngStream,
) -> Result<CovarianceEstimate> {
    if n_samples < 2 {
        return Err(Error::config("need at least two samples"));
    }
    let mut rng = stream.rng();
    let mut ys = Vec::with_capacity(n_samples);
    let mut vs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let e = eta.sample(&mut rng);
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::config(format!("eta must lie in (0, 1), drew {e}")));
        }
        ys.push(f64::from(rng.random_bool(e) as u8));
        vs.push(psi(e));
    }
    let n = n_samples as f64;
    let my = ys.iter().sum::<f64>() / n;
    let mv = vs.iter().sum::<f64>() / n;
    let prod: Vec<f64> = ys.iter().zip(&vs).map(|(y, v)| (y - my) * (v - mv)).collect();
    let covariance = prod.iter().sum::<f64>() / (n - 1.0);
    let mp = prod.iter().sum::<f64>() / n;
    let var = prod.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / (n - 1.0);
    Ok(CovarianceEstimate {
        covariance,
        standard_error: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_atoms() -> DiscreteMeasure {
        DiscreteMeasure::new(vec![
            Atom { phi: 1.0, q: 0.8f64.ln(), p: 0.5 },
            Atom { phi: 0.0, q: 0.2f64.ln(), p: 0.5 },
        ])
        .unwrap()
    }

    #[test]
    fn gap_examples() {
        let g = class_conditional_gap(&[-0.1, -0.2, -1.0], &[true, true, false], &[1.0, 1.0, 1.0]).unwrap();
        assert!((g - 0.85).abs() < 1e-15);
        assert_eq!(class_conditional_gap(&[-0.3, -0.3], &[true, false], &[0.5, 0.5]), Some(0.0));
        assert_eq!(class_conditional_gap(&[-0.3, -0.1], &[true, true], &[0.5, 0.5]), None);
    }

    #[test]
    fn gap_under_shuffled_labels_centers_on_zero() {
        let mut rng = RngStream::new(2, 0, 0, 0).rng();
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0.01f64..1.0).ln()).collect();
        let w = vec![1.0; 40];
        let mut labels: Vec<bool> = (0..40).map(|i| i < 15).collect();
        let mut gaps = Vec::new();
        for _ in 0..1000 {
            rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
            gaps.push(class_conditional_gap(&scores, &labels, &w).unwrap());
        }
        let mean = gaps.iter().sum::<f64>() / 1000.0;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!(mean.abs() < 3.0 * sd / 1000f64.sqrt());
    }

    #[test]
    fn spread_bound_examples() {
        assert_eq!(q_spread_bound(&[-0.4; 5], &[0.2; 5], 1.0, 64).bound, 0.0);
        assert_eq!(q_spread_bound(&[-0.1, -2.0], &[0.5, 0.5], 0.0, 64).bound, 0.0);
        let b = q_spread_bound(&[0.8f64.ln(), 0.2f64.ln()], &[0.5, 0.5], 1.0, 64);
        assert!((b.spread[0] - 0.5 * 4f64.ln()).abs() < 1e-12);
        assert!(b.bound >= 0.5 * 0.5 * 4f64.ln() - 1e-12);
        assert_eq!(b.grid.len(), 64);
        assert_eq!(*b.grid.last().unwrap(), 1.0);
    }

    #[test]
    fn tilt_identity_two_atoms() {
        let m = two_atoms();
        let c = tilt_identity_check(&m, 0.0);
        assert!((c.rhs - 0.25 * 4f64.ln()).abs() < 1e-12);
        assert!((c.rhs - 0.34657).abs() < 1e-5);
        assert!(c.gap < 1e-6);
    }

    #[test]
    fn tilt_identity_degenerate_sides() {
        let flat_phi = DiscreteMeasure::new(vec![
            Atom { phi: 2.0, q: -0.1, p: 0.3 },
            Atom { phi: 2.0, q: -3.0, p: 0.7 },
        ])
        .unwrap();
        let flat_q = DiscreteMeasure::new(vec![
            Atom { phi: 1.0, q: -0.5, p: 0.3 },
            Atom { phi: -4.0, q: -0.5, p: 0.7 },
        ])
        .unwrap();
        for t in [0.0, 0.5, 3.0] {
            for m in [&flat_phi, &flat_q] {
                let c = tilt_identity_check(m, t);
                assert!(c.lhs.abs() < 1e-9 && c.rhs.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_odds_examples() {
        let m = two_atoms();
        let c = log_odds_identity_check(&m, 0.0).unwrap();
        assert!((c.rhs - 4f64.ln()).abs() < 1e-12);
        assert!(c.gap < 1e-5);

        let reversed = DiscreteMeasure::new(vec![
            Atom { phi: 1.0, q: 0.2f64.ln(), p: 0.5 },
            Atom { phi: 0.0, q: 0.8f64.ln(), p: 0.5 },
        ])
        .unwrap();
        let c = log_odds_identity_check(&reversed, 0.3).unwrap();
        assert!(c.rhs < 0.0 && c.lhs < 0.0 && c.gap < 1e-5);

        let symmetric = DiscreteMeasure::new(vec![
            Atom { phi: 1.0, q: -0.1, p: 0.25 },
            Atom { phi: 1.0, q: -1.0, p: 0.25 },
            Atom { phi: 0.0, q: -0.1, p: 0.25 },
            Atom { phi: 0.0, q: -1.0, p: 0.25 },
        ])
        .unwrap();
        let c = log_odds_identity_check(&symmetric, 0.0).unwrap();
        assert!(c.rhs.abs() < 1e-15 && c.lhs.abs() < 1e-9);

        let all_success = DiscreteMeasure::new(vec![Atom { phi: 1.0, q: -0.1, p: 1.0 }]).unwrap();
        assert!(log_odds_identity_check(&all_success, 0.0).is_none());
    }

    #[test]
    fn lemma_cases() {
        let uniform = EtaDistribution::Uniform { low: 0.1, high: 0.9 };
        let s = RngStream::new(6, 0, 0, 0);
        let pos = bce_alignment_check(uniform, f64::ln, 100_000, &s).unwrap();
        assert!(pos.z_score() >= 3.0, "{pos:?}");
        let neg = bce_alignment_check(uniform, |e| -e.ln(), 100_000, &s).unwrap();
        assert!(neg.covariance <= 0.0);
        let flat = bce_alignment_check(EtaDistribution::Constant { value: 0.4 }, f64::ln, 100_000, &s).unwrap();
        assert!(flat.covariance.abs() <= 3.0 * flat.standard_error.max(1e-300));
        assert!(bce_alignment_check(EtaDistribution::Constant { value: 1.0 }, f64::ln, 10, &s).is_err());
    }

    proptest! {
        #[test]
        fn binary_cov_equals_gap_times_bernoulli_variance(seed in 0u64..500, n in 2usize..20, t in 0.0f64..3.0) {
            let m = DiscreteMeasure::random(n, true, &RngStream::new(seed, 0, 0, 0)).unwrap();
            let p = m.success_mass(t);
            if let Some(delta) = m.gap(t) {
                prop_assert!((m.covariance(t) - p * (1.0 - p) * delta).abs() < 1e-12);
            }
        }

        #[test]
        fn spread_bound_caps_mass_shift(seed in 0u64..500, n in 2usize..20, beta in 0.0f64..4.0) {
            let m = DiscreteMeasure::random(n, true, &RngStream::new(seed, 1, 0, 0)).unwrap();
            let shift = (m.success_mass(beta) - m.success_mass(0.0)).abs();
            prop_assert!(shift <= m.spread_bound(beta).bound + 1e-12);
        }

        #[test]
        fn tilted_law_is_a_simplex(seed in 0u64..500, n in 1usize..20, t in -2.0f64..6.0) {
            let m = DiscreteMeasure::random(n, false, &RngStream::new(seed, 2, 0, 0)).unwrap();
            let w = m.tilted(t);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
    }
}

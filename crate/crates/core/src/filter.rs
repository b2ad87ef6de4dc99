//! The guide-tempered particle filter: propagate, temper, normalize,
//! resample on low ESS, and decode by weighted MAP.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{inner_rollout, Backbone, TaskInstance};
use crate::error::{Error, Result};
use crate::guide::{guide_score, Guide};
use crate::proposal::{trajectory_sampler, NoiseConfig};
use crate::rng::{RngStream, RESAMPLE_SLOT};
use crate::state::{normalize_log_weights, ArgmaxDecoder, JointState, ParticleCloud, TokenGrid, WeightVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// `S`
    pub particles: usize,
    /// `N`
    pub outer_steps: usize,
    /// `M`
    pub inner_steps: usize,
    pub sigma: f64,
    pub beta: f64,
    pub tau_ess: f64,
    pub seed: u64,
    /// When false the ESS trigger is ignored and weights accumulate.
    pub resample: bool,
    /// Pair every proposal with a deterministic inner rollout from the same
    /// state and store `|zeta_m - z_m|^2` in the trace.
    pub record_inner_deviation: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            particles: 16,
            outer_steps: 48,
            inner_steps: 6,
            sigma: 0.3,
            beta: 0.25,
            tau_ess: 0.3,
            seed: 0,
            resample: true,
            record_inner_deviation: false,
        }
    }
}

impl InferenceConfig {
    /// The single deterministic path: one particle, no noise.
    pub fn deterministic(outer_steps: usize, inner_steps: usize) -> Self {
        Self {
            particles: 1,
            outer_steps,
            inner_steps,
            sigma: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.outer_steps == 0 || self.inner_steps == 0 {
            return Err(Error::config("particles, outer_steps and inner_steps must be >= 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.tau_ess > 0.0 && self.tau_ess <= 1.0) {
            return Err(Error::config(format!("tau_ess must lie in (0, 1], got {}", self.tau_ess)));
        }
        Ok(())
    }
}

/// What the filter saw at one outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based outer step.
    pub step: usize,
    /// `q` for each proposed particle.
    pub scores: Vec<f64>,
    /// Normalized log-weights after tempering, before any resampling.
    pub log_weights: Vec<f64>,
    pub ess_ratio: f64,
    pub resampled: bool,
    /// 0-based ancestor of each slot; present iff `resampled`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ancestors: Option<Vec<usize>>,
    /// Decode of each proposed particle, before resampling.
    pub answers: Vec<TokenGrid>,
    /// Per particle, `|zeta_m - z_m|^2` for `m = 1..M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_deviation: Option<Vec<Vec<f64>>>,
    /// Weights collapsed at this step and were reset to uniform.
    #[serde(default)]
    pub degenerate: bool,
}

impl StepRecord {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Answers and weights of the cloud the next step starts from.
    pub fn posterior(&self) -> (Vec<TokenGrid>, WeightVector) {
        match &self.ancestors {
            Some(a) => (
                a.iter().map(|&i| self.answers[i].clone()).collect(),
                WeightVector::uniform(a.len()),
            ),
            None => (self.answers.clone(), WeightVector::from_log_weights(&self.log_weights).unwrap_or_else(|_| WeightVector::uniform(self.answers.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub task_id: u64,
    pub steps: Vec<StepRecord>,
}

impl RunTrace {
    /// Weighted MAP of the terminal cloud.
    pub fn map_answer(&self) -> Option<TokenGrid> {
        let last = self.steps.last()?;
        let (answers, weights) = last.posterior();
        Some(weighted_map(&answers, &weights))
    }

    /// True when any particle proposed at the last step decodes to `solution`.
    pub fn oracle_hit(&self, solution: &TokenGrid) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.answers.iter().any(|a| a == solution))
    }

    pub fn resample_count(&self) -> usize {
        self.steps.iter().filter(|s| s.resampled).count()
    }

    pub fn degenerate_count(&self) -> usize {
        self.steps.iter().filter(|s| s.degenerate).count()
    }
}

/// `l_s + beta q_s`, renormalized in the log domain. `beta = 0` returns the
/// input weights untouched.
pub fn tempered_update(log_weights: &[f64], scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    if log_weights.len() != scores.len() {
        return Err(Error::config(format!(
            "{} log-weights but {} scores",
            log_weights.len(),
            scores.len()
        )));
    }
    if beta == 0.0 {
        return Ok(log_weights.to_vec());
    }
    if let Some(i) = scores.iter().position(|q| !q.is_finite()) {
        return Err(Error::DegenerateWeights(format!("non-finite guide score at particle {i}")));
    }
    let raw: Vec<f64> = log_weights.iter().zip(scores).map(|(l, q)| l + beta * q).collect();
    normalize_log_weights(&raw)
}

/// Ancestors by inverting the weight CDF at `(s + u) / S`.
pub fn systematic_resample(weights: &WeightVector, u: f64) -> Vec<usize> {
    let w = weights.as_slice();
    let s = w.len();
    let last_positive = w.iter().rposition(|&v| v > 0.0).unwrap_or(s - 1);
    let mut out = Vec::with_capacity(s);
    let mut j = 0;
    let mut cdf = w[0];
    for k in 0..s {
        let p = (k as f64 + u) / s as f64;
        while cdf <= p && j < last_positive {
            j += 1;
            cdf += w[j];
        }
        out.push(j);
    }
    out
}

/// Groups equal answers, sums their weight, and returns the heaviest group.
/// Exact ties go to the lexicographically smallest answer.
pub fn weighted_map(answers: &[TokenGrid], weights: &WeightVector) -> TokenGrid {
    let mut mass: BTreeMap<&TokenGrid, f64> = BTreeMap::new();
    for (a, w) in answers.iter().zip(weights.as_slice()) {
        *mass.entry(a).or_insert(0.0) += w;
    }
    let mut best: Option<(&TokenGrid, f64)> = None;
    for (a, m) in mass {
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((a, m));
        }
    }
    best.expect("non-empty cloud").0.clone()
}

pub fn weighted_map_decode(cloud: &ParticleCloud, decoder: &ArgmaxDecoder) -> TokenGrid {
    let answers: Vec<TokenGrid> = cloud.particles.iter().map(|h| decoder.decode(h)).collect();
    weighted_map(&answers, &cloud.weights)
}

struct Proposed {
    state: JointState,
    score: f64,
    answer: TokenGrid,
    deviation: Option<Vec<f64>>,
}

/// Runs the filter on one task and returns the terminal weighted-MAP answer
/// with the full trace.
pub fn run_guided_inference(
    config: &InferenceConfig,
    backbone: &dyn Backbone,
    guide: &dyn Guide,
    decoder: &ArgmaxDecoder,
    task: &TaskInstance,
) -> Result<(TokenGrid, RunTrace)> {
    config.validate()?;
    task.check_shape(backbone.shape())?;
    let noise = NoiseConfig::gaussian(config.sigma)?;
    let s = config.particles;
    let mut cloud = ParticleCloud::replicate(&task.h0, s);
    let mut log_w = vec![-(s as f64).ln(); s];
    let mut steps = Vec::with_capacity(config.outer_steps);

    for n in 0..config.outer_steps {
        let proposed: Vec<Proposed> = cloud
            .particles
            .par_iter()
            .enumerate()
            .map(|(i, h)| {
                let stream = RngStream::new(config.seed, task.id, i as u64, n as u64);
                let t = trajectory_sampler(backbone, &task.x, h, config.inner_steps, &noise, &stream)?;
                let deviation = if config.record_inner_deviation {
                    let det = inner_rollout(backbone, &task.x, h, config.inner_steps)?;
                    Some(t.inner.iter().zip(&det).map(|(a, b)| a.sub(b).norm_sq()).collect())
                } else {
                    None
                };
                let score = guide_score(guide, &t.state);
                let answer = decoder.decode(&t.state);
                Ok(Proposed {
                    state: t.state,
                    score,
                    answer,
                    deviation,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NumericDivergence { stage, step, sigma } => Error::NumericDivergence {
                    stage,
                    step: n * (config.inner_steps + 1) + step,
                    sigma,
                },
                other => other,
            })?;

        let mut scores = Vec::with_capacity(s);
        let mut answers = Vec::with_capacity(s);
        let mut deviations = config.record_inner_deviation.then(|| Vec::with_capacity(s));
        let mut particles = Vec::with_capacity(s);
        for p in proposed {
            scores.push(p.score);
            answers.push(p.answer);
            if let (Some(d), Some(v)) = (deviations.as_mut(), p.deviation) {
                d.push(v);
            }
            particles.push(p.state);
        }

        let (updated, degenerate) = match tempered_update(&log_w, &scores, config.beta) {
            Ok(l) => (l, false),
            Err(Error::DegenerateWeights(_)) => (vec![-(s as f64).ln(); s], true),
            Err(e) => return Err(e),
        };
        log_w = updated;
        let weights = WeightVector::from_log_weights(&log_w)?;
        let ess_ratio = weights.ess() / s as f64;
        let resampled = config.resample && ess_ratio < config.tau_ess;
        let ancestors = if resampled {
            let u: f64 = RngStream::new(config.seed, task.id, RESAMPLE_SLOT, n as u64)
                .rng()
                .random();
            let a = systematic_resample(&weights, u);
            particles = a.iter().map(|&i| particles[i].clone()).collect();
            Some(a)
        } else {
            None
        };
        steps.push(StepRecord {
            step: n + 1,
            scores,
            log_weights: log_w.clone(),
            ess_ratio,
            resampled,
            ancestors,
            answers,
            inner_deviation: deviations,
            degenerate,
        });
        if resampled {
            log_w = vec![-(s as f64).ln(); s];
        }
        cloud = ParticleCloud::new(particles, WeightVector::from_log_weights(&log_w)?, n + 1)?;
    }

    let answer = weighted_map_decode(&cloud, decoder);
    let trace = RunTrace {
        task_id: task.id,
        steps,
    };
    debug_assert_eq!(trace.map_answer().as_ref(), Some(&answer));
    Ok((answer, trace))
}

//! Diagnostics read off saved clouds and synthetic backbones: tube
//! stability, guide alignment, and token-entropy uncertainty.

mod alignment;
mod entropy;
mod tube;

use serde::{Deserialize, Serialize};

pub use alignment::{
    bce_alignment_check, class_conditional_gap, log_odds_identity_check, q_spread_bound, tilt,
    tilt_identity_check, weighted_std, Atom, CovarianceEstimate, DiscreteMeasure, EtaDistribution,
    IdentityCheck, SpreadBound, FD_STEP, TILT_GRID_POINTS,
};
pub use entropy::{
    abstention, bootstrap_auroc, normalized_entropy, risk_ranking_auroc, token_entropy, token_marginals,
    AbstentionReport, EntropyReport, Interval,
};
pub use tube::{
    empirical_lipschitz, exit_bound, first_exit, pre_exit_bound, summarize_deviations, tube_statistics,
    RadiusReport, TubeReport, DEFAULT_PROBES,
};

use crate::filter::{RunTrace, StepRecord};
use crate::state::TokenGrid;

/// How a particle at step `n` counts as successful.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessLabels {
    /// Its own decode at step `n` is the solution.
    #[default]
    PerStep,
    /// Some descendant at the last step decodes to the solution.
    TerminalHorizon,
}

/// Weights the cloud carries into the step after `rec`.
pub fn carried_weights(rec: &StepRecord) -> Vec<f64> {
    if rec.resampled {
        vec![1.0 / rec.answers.len() as f64; rec.answers.len()]
    } else {
        rec.weights()
    }
}

/// Labels for every proposed particle at every step.
pub fn success_labels(trace: &RunTrace, solution: &TokenGrid, mode: SuccessLabels) -> Vec<Vec<bool>> {
    let per_step: Vec<Vec<bool>> = trace
        .steps
        .iter()
        .map(|r| r.answers.iter().map(|a| a == solution).collect())
        .collect();
    match mode {
        SuccessLabels::PerStep => per_step,
        SuccessLabels::TerminalHorizon => {
            let mut out = per_step;
            for n in (0..out.len().saturating_sub(1)).rev() {
                let s = out[n].len();
                let next = out[n + 1].clone();
                let mut labels = vec![false; s];
                match &trace.steps[n].ancestors {
                    Some(a) => {
                        for (slot, &parent) in a.iter().enumerate() {
                            labels[parent] |= next[slot];
                        }
                    }
                    None => labels.copy_from_slice(&next),
                }
                out[n] = labels;
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStep {
    pub step: usize,
    /// Class-conditional gap under the pre-tempering weights.
    pub gap: Option<f64>,
    /// `std_s[q]` under the pre-tempering weights.
    pub spread: f64,
    /// `(beta / 2) sup_t std_t[q]`.
    pub spread_bound: f64,
    /// Success mass after tempering.
    pub success_mass: Option<f64>,
    /// Weighted score sums and masses per class, for pooling across runs.
    pub success_weight: f64,
    pub success_score_sum: f64,
    pub failure_weight: f64,
    pub failure_score_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub beta: f64,
    pub labels: Option<SuccessLabels>,
    pub steps: Vec<AlignmentStep>,
}

impl AlignmentReport {
    pub fn max_spread_bound(&self) -> f64 {
        self.steps.iter().map(|s| s.spread_bound).fold(0.0, f64::max)
    }
}

/// Per-step alignment readout. Without a solution only the label-free
/// spread quantities are filled in.
pub fn alignment_report(
    trace: &RunTrace,
    solution: Option<&TokenGrid>,
    beta: f64,
    mode: SuccessLabels,
) -> AlignmentReport {
    let labels = solution.map(|s| success_labels(trace, s, mode));
    let mut base: Option<Vec<f64>> = None;
    let steps = trace
        .steps
        .iter()
        .enumerate()
        .map(|(n, rec)| {
            let s = rec.scores.len();
            let w = base.take().unwrap_or_else(|| vec![1.0 / s as f64; s]);
            let bound = q_spread_bound(&rec.scores, &w, beta, TILT_GRID_POINTS);
            let mut step = AlignmentStep {
                step: rec.step,
                gap: None,
                spread: weighted_std(&rec.scores, &w),
                spread_bound: bound.bound,
                success_mass: None,
                success_weight: 0.0,
                success_score_sum: 0.0,
                failure_weight: 0.0,
                failure_score_sum: 0.0,
            };
            if let Some(l) = labels.as_ref().map(|l| &l[n]) {
                step.gap = class_conditional_gap(&rec.scores, l, &w);
                let post = rec.weights();
                step.success_mass = Some(l.iter().zip(&post).filter(|(ok, _)| **ok).map(|(_, w)| w).sum());
                for ((&ok, &q), &wi) in l.iter().zip(&rec.scores).zip(&w) {
                    if ok {
                        step.success_weight += wi;
                        step.success_score_sum += wi * q;
                    } else {
                        step.failure_weight += wi;
                        step.failure_score_sum += wi * q;
                    }
                }
            }
            base = Some(carried_weights(rec));
            step
        })
        .collect();
    AlignmentReport {
        beta,
        labels: solution.map(|_| mode),
        steps,
    }
}

/// Gap per step under the two ways of pooling runs: all particles at once
/// (each run carrying unit mass) and the mean of per-run gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledGap {
    pub step: usize,
    pub pooled_particles: Option<f64>,
    pub mean_of_runs: Option<f64>,
    pub runs_with_both_classes: usize,
}

pub fn pooled_gaps(reports: &[AlignmentReport]) -> Vec<PooledGap> {
    let steps = reports.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    (0..steps)
        .map(|n| {
            let (mut ws, mut ss, mut wf, mut sf) = (0.0, 0.0, 0.0, 0.0);
            let mut gaps = Vec::new();
            for st in reports.iter().filter_map(|r| r.steps.get(n)) {
                ws += st.success_weight;
                ss += st.success_score_sum;
                wf += st.failure_weight;
                sf += st.failure_score_sum;
                gaps.extend(st.gap);
            }
            PooledGap {
                step: n + 1,
                pooled_particles: (ws > 0.0 && wf > 0.0).then(|| ss / ws - sf / wf),
                mean_of_runs: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
                runs_with_both_classes: gaps.len(),
            }
        })
        .collect()
}

//! Token-level uncertainty from the weighted cloud: normalized marginal
//! entropies, their path average, and risk ranking against token errors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::filter::RunTrace;
use crate::rng::RngStream;
use crate::state::TokenGrid;

/// Per-position class marginals of a weighted set of answers.
pub fn token_marginals(answers: &[TokenGrid], weights: &[f64], classes: u32) -> Vec<Vec<f64>> {
    let len = answers.first().map_or(0, TokenGrid::len);
    let mut p = vec![vec![0.0; classes as usize]; len];
    let total: f64 = weights.iter().sum();
    for (a, w) in answers.iter().zip(weights) {
        for (l, &t) in a.tokens().iter().enumerate() {
            p[l][(t - 1) as usize] += w / total;
        }
    }
    p
}

/// Shannon entropy divided by `log C`, with `0 log 0 = 0`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// `H_l` at the terminal step.
    pub terminal: Vec<f64>,
    /// `H-bar_l`, averaged over the requested steps.
    pub aggregated: Vec<f64>,
    /// `H-bar_l - H_l`.
    pub contraction: Vec<f64>,
    /// Terminal marginals `p_{l,k}`.
    pub marginals: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
}

/// Entropies of the tempered cloud (proposed answers under post-tempering
/// weights) at the last step and averaged over `steps` (1-based; all steps
/// when `None`).
pub fn token_entropy(trace: &RunTrace, steps: Option<&[usize]>, classes: u32) -> EntropyReport {
    let entropies_at = |n: usize| -> (Vec<f64>, Vec<Vec<f64>>) {
        let rec = &trace.steps[n - 1];
        let m = token_marginals(&rec.answers, &rec.weights(), classes);
        (m.iter().map(|p| normalized_entropy(p)).collect(), m)
    };
    let n_steps = trace.steps.len();
    let chosen: Vec<usize> = match steps {
        Some(s) => s.iter().copied().filter(|&n| n >= 1 && n <= n_steps).collect(),
        None => (1..=n_steps).collect(),
    };
    if n_steps == 0 {
        return EntropyReport {
            terminal: vec![],
            aggregated: vec![],
            contraction: vec![],
            marginals: vec![],
            steps: chosen,
        };
    }
    let (terminal, marginals) = entropies_at(n_steps);
    let mut aggregated = vec![0.0; terminal.len()];
    for &n in &chosen {
        for (acc, h) in aggregated.iter_mut().zip(entropies_at(n).0) {
            *acc += h;
        }
    }
    let j = chosen.len().max(1) as f64;
    aggregated.iter_mut().for_each(|v| *v /= j);
    let contraction = aggregated.iter().zip(&terminal).map(|(a, t)| a - t).collect();
    EntropyReport {
        terminal,
        aggregated,
        contraction,
        marginals,
        steps: chosen,
    }
}

/// AUROC of `scores` for flagging `positive` items (rank-sum, midranks).
/// `None` unless both classes occur.
pub fn risk_ranking_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

/// Percentile bootstrap for the AUROC, resampling whole `groups` (e.g.
/// instances) so correlated tokens move together. Replicates that lose a
/// class are skipped.
pub fn bootstrap_auroc(
    scores: &[f64],
    positive: &[bool],
    groups: &[u64],
    replicates: usize,
    level: f64,
    stream: &RngStream,
) -> Option<Interval> {
    let mut ids: Vec<u64> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|g| (0..groups.len()).filter(|&i| groups[i] == *g).collect())
        .collect();
    let mut rng = stream.rng();
    let mut stats = Vec::with_capacity(replicates);
    let (mut s, mut p) = (Vec::new(), Vec::new());
    for _ in 0..replicates {
        s.clear();
        p.clear();
        for _ in 0..members.len() {
            for &i in &members[rng.random_range(0..members.len())] {
                s.push(scores[i]);
                p.push(positive[i]);
            }
        }
        if let Some(a) = risk_ranking_auroc(&s, &p) {
            stats.push(a);
        }
    }
    if stats.is_empty() {
        return None;
    }
    stats.sort_by(f64::total_cmp);
    let q = |f: f64| stats[((f * (stats.len() - 1) as f64).round() as usize).min(stats.len() - 1)];
    let tail = (1.0 - level) / 2.0;
    Some(Interval {
        low: q(tail),
        high: q(1.0 - tail),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstentionReport {
    pub tokens: usize,
    pub abstained: usize,
    pub unconditional_accuracy: f64,
    pub retained_accuracy: f64,
}

/// Drops the `fraction` of tokens with the highest `scores` (ties by index)
/// and reports accuracy on the rest.
pub fn abstention(scores: &[f64], correct: &[bool], fraction: f64) -> AbstentionReport {
    let n = scores.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let acc = |it: &[usize]| {
        if it.is_empty() {
            0.0
        } else {
            it.iter().filter(|&&i| correct[i]).count() as f64 / it.len() as f64
        }
    };
    AbstentionReport {
        tokens: n,
        abstained: k,
        unconditional_accuracy: acc(&idx),
        retained_accuracy: acc(&idx[k..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::StepRecord;

    fn grid(t: &[u32], c: u32) -> TokenGrid {
        TokenGrid::new(t.to_vec(), c).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-15);
        assert!((normalized_entropy(&[0.5, 0.5, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn marginals_sum_to_one() {
        let answers = vec![grid(&[1, 2], 3), grid(&[1, 3], 3), grid(&[2, 3], 3)];
        let m = token_marginals(&answers, &[0.5, 0.25, 0.25], 3);
        assert_eq!(m[0], vec![0.75, 0.25, 0.0]);
        assert_eq!(m[1], vec![0.0, 0.5, 0.5]);
    }

    fn record(step: usize, answers: Vec<TokenGrid>) -> StepRecord {
        let s = answers.len();
        StepRecord {
            step,
            scores: vec![0.0; s],
            log_weights: vec![-(s as f64).ln(); s],
            ess_ratio: 1.0,
            resampled: false,
            ancestors: None,
            answers,
            inner_deviation: None,
            degenerate: false,
        }
    }

    #[test]
    fn contraction_from_trace() {
        let trace = RunTrace {
            task_id: 0,
            steps: vec![
                record(1, vec![grid(&[1, 1], 2), grid(&[2, 1], 2)]),
                record(2, vec![grid(&[1, 1], 2), grid(&[1, 1], 2)]),
            ],
        };
        let r = token_entropy(&trace, None, 2);
        assert_eq!(r.terminal, vec![0.0, 0.0]);
        assert_eq!(r.aggregated, vec![0.5, 0.0]);
        assert_eq!(r.contraction, vec![0.5, 0.0]);
        let only_last = token_entropy(&trace, Some(&[2]), 2);
        assert_eq!(only_last.contraction, vec![0.0, 0.0]);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(risk_ranking_auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(risk_ranking_auroc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]), Some(0.0));
        assert_eq!(risk_ranking_auroc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(risk_ranking_auroc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn auroc_matches_pair_count() {
        // pairwise oracle: P(score_pos > score_neg) + P(tie) / 2
        let mut rng = RngStream::new(1, 0, 0, 0).rng();
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6)) as f64).collect();
            let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let Some(a) = risk_ranking_auroc(&s, &p) else { continue };
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if p[i] && !p[j] {
                        den += 1.0;
                        num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            assert!((a - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_of_shuffled_labels_is_half() {
        let mut rng = RngStream::new(4, 0, 0, 0).rng();
        let s: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let mut p: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let mut total = 0.0;
        for _ in 0..1000 {
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
            total += risk_ranking_auroc(&s, &p).unwrap();
        }
        assert!((total / 1000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn bootstrap_brackets_a_clear_signal() {
        let mut rng = RngStream::new(9, 0, 0, 0).rng();
        let n = 400;
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let s: Vec<f64> = p.iter().map(|&e| rng.random::<f64>() + if e { 0.5 } else { 0.0 }).collect();
        let groups: Vec<u64> = (0..n as u64).map(|i| i / 4).collect();
        let ci = bootstrap_auroc(&s, &p, &groups, 500, 0.95, &RngStream::new(1, 1, 1, 1)).unwrap();
        let a = risk_ranking_auroc(&s, &p).unwrap();
        assert!(ci.contains(a));
        assert!(ci.low > 0.5);
    }

    #[test]
    fn abstention_drops_highest() {
        let r = abstention(&[0.9, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[false, true, true, true, true, true, true, true, true, true], 0.1);
        assert_eq!(r.abstained, 1);
        assert!((r.unconditional_accuracy - 0.9).abs() < 1e-15);
        assert_eq!(r.retained_accuracy, 1.0);
    }
}

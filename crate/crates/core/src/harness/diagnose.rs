use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{read_trace_dir, POOL_FILE, SUMMARY_FILE, TRACE_DIR};
use super::io::{self, Pool, RunMode, SummaryRow, TracedRun};
use crate::diagnostics::{
    abstention, alignment_report, bootstrap_auroc, pooled_gaps, risk_ranking_auroc, summarize_deviations,
    token_entropy, tube_statistics, AbstentionReport, AlignmentReport, EntropyReport, Interval, PooledGap,
    SuccessLabels, TubeReport,
};
use crate::error::{Error, Result};
use crate::rng::{RngStream, DIAGNOSTIC_TAG, TUBE_TAG};

pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const REPORT_FILE: &str = "report.md";

/// Below this cap on the success-mass shift a guide cannot help.
const SPREAD_CAP_FLOOR_PERCENT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseOptions {
    /// Instances that get fresh tube rollouts (lowest ids first).
    pub tube_instances: usize,
    pub tube_rollouts: usize,
    /// Tube radii `r = alpha sqrt(L D)`.
    pub tube_alphas: Vec<f64>,
    pub bootstrap_replicates: usize,
    pub confidence: f64,
    pub abstain_fraction: f64,
    pub seed: u64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            tube_instances: 4,
            tube_rollouts: 1000,
            tube_alphas: vec![0.5, 1.0, 1.5],
            bootstrap_replicates: 1000,
            confidence: 0.95,
            abstain_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The guide can move mass and leans toward success.
    Go,
    /// Either the spread cap is negligible or the gap is not positive.
    NoGo,
    /// No labels to read the gap from.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiagnostics {
    pub run: String,
    pub instance: u64,
    pub alignment: AlignmentReport,
    pub entropy: EntropyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub per_step_labels: Vec<PooledGap>,
    pub terminal_labels: Vec<PooledGap>,
    /// Mean score spread per step across runs.
    pub spread_curve: Vec<f64>,
    /// Largest `(beta / 2) sup_t std_t[q]` over runs and steps.
    pub max_spread_bound: f64,
    pub spread_cap_percent: f64,
    /// Mean of the particle-pooled gap over steps with both classes.
    pub mean_gap: Option<f64>,
    pub verdict: Verdict,
    pub readout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    /// Free (non-clue) tokens scored.
    pub tokens: usize,
    pub errors: usize,
    /// AUROC of the terminal entropy for flagging MAP token errors.
    pub auroc: Option<f64>,
    pub auroc_interval: Option<Interval>,
    /// Abstaining on the highest path-averaged entropies.
    pub abstention: Option<AbstentionReport>,
    pub mean_contraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    pub point: usize,
    pub sigma: f64,
    pub beta: f64,
    pub runs: usize,
    pub alignment: AlignmentSummary,
    pub entropy: EntropySummary,
    /// Fresh rollouts from the initial state of a few instances.
    pub tube: Vec<(u64, TubeReport)>,
    /// From inner deviations stored in the traces, when recorded.
    pub trace_tube: Option<TubeReport>,
    /// Per-instance reports for the first seed.
    pub instances: Vec<InstanceDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub options: DiagnoseOptions,
    pub points: Vec<PointDiagnostics>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn alignment_summary(reports: &[AlignmentReport], terminal: &[AlignmentReport], beta: f64, labelled: bool) -> AlignmentSummary {
    let per_step_labels = pooled_gaps(reports);
    let terminal_labels = pooled_gaps(terminal);
    let steps = reports.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let spread_curve = (0..steps)
        .map(|n| mean(reports.iter().filter_map(|r| r.steps.get(n)).map(|s| s.spread)).unwrap_or(0.0))
        .collect();
    let max_spread_bound = reports.iter().map(|r| r.max_spread_bound()).fold(0.0, f64::max);
    let spread_cap_percent = 100.0 * max_spread_bound;
    let mean_gap = mean(per_step_labels.iter().filter_map(|g| g.pooled_particles));
    let verdict = if spread_cap_percent < SPREAD_CAP_FLOOR_PERCENT {
        Verdict::NoGo
    } else if !labelled {
        Verdict::Inconclusive
    } else if mean_gap.is_some_and(|g| g > 0.0) {
        Verdict::Go
    } else {
        Verdict::NoGo
    };
    let readout = format!(
        "spread bound at beta={beta} caps mass shift at {spread_cap_percent:.3}%; mean class gap {}: {}",
        mean_gap.map_or_else(|| "n/a".to_string(), |g| format!("{g:.4}")),
        match verdict {
            Verdict::Go => "go",
            Verdict::NoGo => "no-go",
            Verdict::Inconclusive => "inconclusive",
        }
    );
    AlignmentSummary {
        per_step_labels,
        terminal_labels,
        spread_curve,
        max_spread_bound,
        spread_cap_percent,
        mean_gap,
        verdict,
        readout,
    }
}

/// Reads an output directory and computes alignment, entropy and tube
/// diagnostics for every point's guided runs. Without ground truth the
/// class gaps and token-error statistics are left empty.
pub fn diagnose(dir: &Path, options: &DiagnoseOptions) -> Result<DiagnosticsBundle> {
    let pool = Pool::read(&dir.join(POOL_FILE))?;
    let runs = read_trace_dir(&dir.join(TRACE_DIR))?;
    diagnose_runs(&pool, &runs, options)
}

pub fn diagnose_runs(
    pool: &Pool,
    runs: &[TracedRun],
    options: &DiagnoseOptions,
) -> Result<DiagnosticsBundle> {
    if !(options.abstain_fraction >= 0.0 && options.abstain_fraction < 1.0) {
        return Err(Error::config("abstain_fraction must lie in [0, 1)"));
    }
    if !(options.confidence > 0.0 && options.confidence < 1.0) {
        return Err(Error::config("confidence must lie in (0, 1)"));
    }
    let tasks: BTreeMap<u64, &crate::backbone::TaskInstance> = pool.tasks.iter().map(|t| (t.id, t)).collect();
    let mut by_point: BTreeMap<usize, Vec<&TracedRun>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.mode == RunMode::Guided) {
        by_point.entry(r.point).or_default().push(r);
    }
    let (rows, dim) = pool.header.testbed.shape();
    let mut points = Vec::new();
    for (point, runs) in by_point {
        let config = runs[0].config.clone();
        let classes = runs[0].classes;
        let solution = |r: &TracedRun| tasks.get(&r.instance).and_then(|t| t.solution.as_ref());
        let labelled = runs.iter().all(|r| solution(r).is_some());

        let mut per_step = Vec::with_capacity(runs.len());
        let mut terminal = Vec::with_capacity(runs.len());
        let mut instances = Vec::new();
        let (mut h, mut h_bar, mut wrong, mut groups) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut contraction = Vec::new();
        for r in &runs {
            let sol = solution(r);
            let a = alignment_report(&r.trace, sol, config.beta, SuccessLabels::PerStep);
            terminal.push(alignment_report(&r.trace, sol, config.beta, SuccessLabels::TerminalHorizon));
            let e = token_entropy(&r.trace, None, classes);
            if let (Some(sol), Some(task), Some(map)) = (sol, tasks.get(&r.instance), r.trace.map_answer()) {
                for l in task.free_positions(sol.len()) {
                    h.push(e.terminal[l]);
                    h_bar.push(e.aggregated[l]);
                    wrong.push(map.tokens()[l] != sol.tokens()[l]);
                    groups.push(r.instance);
                    contraction.push(e.contraction[l]);
                }
            }
            if r.seed == 0 {
                instances.push(InstanceDiagnostics {
                    run: r.run.clone(),
                    instance: r.instance,
                    alignment: a.clone(),
                    entropy: e,
                });
            }
            per_step.push(a);
        }
        let stream = RngStream::new(options.seed, DIAGNOSTIC_TAG, point as u64, 0);
        let entropy = EntropySummary {
            tokens: h.len(),
            errors: wrong.iter().filter(|&&w| w).count(),
            auroc: risk_ranking_auroc(&h, &wrong),
            auroc_interval: bootstrap_auroc(
                &h,
                &wrong,
                &groups,
                options.bootstrap_replicates,
                options.confidence,
                &stream,
            ),
            abstention: (!h_bar.is_empty()).then(|| {
                let correct: Vec<bool> = wrong.iter().map(|w| !w).collect();
                abstention(&h_bar, &correct, options.abstain_fraction)
            }),
            mean_contraction: mean(contraction),
        };

        let mut tube = Vec::new();
        for task in pool.tasks.iter().take(options.tube_instances) {
            let backbone = pool.header.testbed.backbone_for(task, pool.header.seed)?;
            let s = RngStream::new(options.seed, TUBE_TAG, 0, task.id);
            let rep = tube_statistics(
                &*backbone,
                &task.x,
                &task.h0,
                config.inner_steps,
                config.sigma,
                &options.tube_alphas,
                options.tube_rollouts,
                &s,
            )?;
            tube.push((task.id, rep));
        }
        let recorded: Vec<Vec<f64>> = runs
            .iter()
            .flat_map(|r| r.trace.steps.iter())
            .filter_map(|s| s.inner_deviation.as_ref())
            .flatten()
            .cloned()
            .collect();
        let trace_tube = (!recorded.is_empty()).then(|| {
            summarize_deviations(&recorded, &options.tube_alphas, rows * dim, config.sigma, config.inner_steps, |_| None)
        });

        points.push(PointDiagnostics {
            point,
            sigma: config.sigma,
            beta: config.beta,
            runs: runs.len(),
            alignment: alignment_summary(&per_step, &terminal, config.beta, labelled),
            entropy,
            tube,
            trace_tube,
            instances,
        });
    }
    Ok(DiagnosticsBundle {
        options: options.clone(),
        points,
    })
}

/// Writes `diagnostics.json` and `report.md` into `dir`.
pub fn write_diagnostics(dir: &Path, bundle: &DiagnosticsBundle) -> Result<()> {
    let json = serde_json::to_string_pretty(bundle).map_err(|e| Error::parse(e.to_string()))?;
    io::write_text(&dir.join(DIAGNOSTICS_FILE), &json)?;
    let summary = io::parse_summary(&io::read_to_string(&dir.join(SUMMARY_FILE))?)?;
    io::write_text(&dir.join(REPORT_FILE), &render_report(&summary, Some(bundle)))
}

pub fn read_diagnostics(path: &Path) -> Result<DiagnosticsBundle> {
    serde_json::from_str(&io::read_to_string(path)?).map_err(|e| Error::parse(format!("diagnostics: {e}")))
}

fn pct(v: Option<f64>, sd: Option<f64>) -> String {
    match (v, sd) {
        (Some(m), Some(s)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s),
        (Some(m), None) => format!("{:.1}", 100.0 * m),
        _ => "n/a".to_string(),
    }
}

/// Markdown digest of a summary table and, when given, the diagnostics.
pub fn render_report(summary: &[SummaryRow], bundle: Option<&DiagnosticsBundle>) -> String {
    let mut out = String::from("# Experiment report\n\n## Exact-solve rates (%)\n\n");
    out.push_str("| point | sigma | beta | S | tau | resample | split | n | cells | deterministic | unguided | oracle | guided MAP |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in summary {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.point,
            r.sigma,
            r.beta,
            r.particles,
            r.tau_ess,
            r.resample,
            r.split,
            r.instances,
            r.cells,
            pct(r.deterministic_mean, r.deterministic_sd),
            pct(r.unguided_mean, r.unguided_sd),
            pct(r.oracle_mean, r.oracle_sd),
            pct(r.guided_mean, r.guided_sd),
        );
    }
    let Some(b) = bundle else {
        return out;
    };
    out.push_str("\n## Diagnostics\n");
    for p in &b.points {
        let _ = writeln!(out, "\n### Point {} (sigma = {}, beta = {})\n", p.point, p.sigma, p.beta);
        let _ = writeln!(out, "- Alignment: {}", p.alignment.readout);
        let e = &p.entropy;
        match (e.auroc, e.auroc_interval) {
            (Some(a), Some(ci)) => {
                let _ = writeln!(
                    out,
                    "- Entropy AUROC for token errors: {a:.3} [{:.3}, {:.3}] over {} free tokens ({} errors)",
                    ci.low, ci.high, e.tokens, e.errors
                );
            }
            (Some(a), None) => {
                let _ = writeln!(out, "- Entropy AUROC for token errors: {a:.3}");
            }
            _ => {
                let _ = writeln!(out, "- Entropy AUROC: n/a ({} tokens, {} errors)", e.tokens, e.errors);
            }
        }
        if let Some(ab) = &e.abstention {
            let _ = writeln!(
                out,
                "- Abstaining on {} of {} tokens: accuracy {:.2}% -> {:.2}%",
                ab.abstained,
                ab.tokens,
                100.0 * ab.unconditional_accuracy,
                100.0 * ab.retained_accuracy
            );
        }
        for (id, t) in &p.tube {
            let survival: Vec<String> = t.radii.iter().map(|r| format!("{}: {:.3}", r.alpha, r.survival)).collect();
            let _ = writeln!(out, "- Tube survival, instance {id} (alpha: P[stay]): {}", survival.join(", "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::InferenceConfig;
    use crate::harness::{run_experiment, ExperimentPlan, GuideSpec, PoolSpec};

    fn plan(dir: &Path, guide: GuideSpec, sigma: f64) -> ExperimentPlan {
        ExperimentPlan {
            pool: PoolSpec {
                size: 30,
                seed: 2,
                file: None,
            },
            guide,
            inference: InferenceConfig {
                particles: 8,
                outer_steps: 16,
                sigma,
                record_inner_deviation: true,
                ..InferenceConfig::default()
            },
            n_seeds: 1,
            n_folds: 3,
            output_dir: dir.to_path_buf(),
            ..ExperimentPlan::default()
        }
    }

    fn opts() -> DiagnoseOptions {
        DiagnoseOptions {
            tube_instances: 2,
            tube_rollouts: 100,
            bootstrap_replicates: 200,
            ..DiagnoseOptions::default()
        }
    }

    #[test]
    fn flat_guide_reads_no_go() {
        let d = tempfile::tempdir().unwrap();
        run_experiment(&plan(d.path(), GuideSpec::Flat { level: 0.0, jitter: 0.01 }, 0.3)).unwrap();
        let b = diagnose(d.path(), &opts()).unwrap();
        let a = &b.points[0].alignment;
        assert!(a.spread_cap_percent < 1.0, "{}", a.readout);
        assert_eq!(a.verdict, Verdict::NoGo);
        write_diagnostics(d.path(), &b).unwrap();
        assert_eq!(read_diagnostics(&d.path().join(DIAGNOSTICS_FILE)).unwrap(), b);
        let report = std::fs::read_to_string(d.path().join(REPORT_FILE)).unwrap();
        assert!(report.contains("no-go"));
    }

    #[test]
    fn aligned_guide_has_positive_gap() {
        let d = tempfile::tempdir().unwrap();
        run_experiment(&plan(d.path(), GuideSpec::default(), 0.3)).unwrap();
        let b = diagnose(d.path(), &opts()).unwrap();
        let p = &b.points[0];
        let both: Vec<f64> = p.alignment.per_step_labels.iter().filter_map(|g| g.pooled_particles).collect();
        assert!(!both.is_empty());
        assert!(both.iter().all(|&g| g > 0.0), "{both:?}");
        assert_eq!(p.alignment.verdict, Verdict::Go);
        assert!(p.trace_tube.is_some());
        assert_eq!(p.instances.len(), 27);
    }

    #[test]
    fn zero_noise_tube_is_flat() {
        let d = tempfile::tempdir().unwrap();
        run_experiment(&plan(d.path(), GuideSpec::default(), 0.0)).unwrap();
        let b = diagnose(d.path(), &opts()).unwrap();
        let p = &b.points[0];
        for (_, t) in &p.tube {
            assert!(t.radii.iter().all(|r| r.in_tube_second_moment.iter().all(|&v| v == 0.0)));
        }
        let tt = p.trace_tube.as_ref().unwrap();
        assert!(tt.radii.iter().all(|r| r.survival == 1.0 && r.in_tube_second_moment.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_ground_truth_keeps_label_free_parts() {
        let d = tempfile::tempdir().unwrap();
        let p = plan(d.path(), GuideSpec::Flat { level: 0.0, jitter: 0.01 }, 0.3);
        run_experiment(&p).unwrap();
        let mut pool = Pool::read(&d.path().join(POOL_FILE)).unwrap();
        pool.tasks.iter_mut().for_each(|t| t.solution = None);
        let runs = read_trace_dir(&d.path().join(TRACE_DIR)).unwrap();
        let b = diagnose_runs(&pool, &runs, &opts()).unwrap();
        let a = &b.points[0].alignment;
        assert!(a.per_step_labels.iter().all(|g| g.pooled_particles.is_none()));
        assert!(a.spread_curve.iter().all(|s| s.is_finite()));
        assert_eq!(b.points[0].entropy.tokens, 0);
        assert!(b.points[0].entropy.auroc.is_none());
    }
}

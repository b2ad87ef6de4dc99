//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use gse_core::diagnostics::{bce_alignment_check, log_odds_identity_check, tube_statistics, DiscreteMeasure, EtaDistribution};
use gse_core::harness::{
    diagnose, read_trace_dir, run_experiment, verify, DiagnoseOptions, ExperimentOutcome, ExperimentPlan, GuideSpec,
    PoolSpec, RunMode, SummaryRow, TracedRun, TRACE_DIR,
};
use gse_core::{
    run_guided_inference, systematic_resample, AffineTestbed, Backbone, FlatGuide, InferenceConfig, JointState,
    LatentTensor, LatinTestbed, OracleGuide, RngStream, WeightVector,
};
use rand::Rng;

// tolerances
const BITWISE: f64 = 0.0;
const TUBE_SE_ALLOWANCE: f64 = 3.0;
const IDENTITY_TOL: f64 = 1e-5;
const LOG_ODDS_RANGE: (f64, f64) = (0.01, 0.99);
const BCE_Z_MIN: f64 = 3.0;
const RESAMPLE_MEAN_TOL: f64 = 1e-3;
const GUIDED_GAIN_MIN: f64 = 0.10;
const ORACLE_GAP_MAX: f64 = 0.05;
const P_DET_RANGE: (f64, f64) = (0.3, 0.9);
const FLAT_ESS_MIN: f64 = 0.99;
const FLAT_SPREAD_CAP_PERCENT: f64 = 1.0;

const PHENOMENOLOGY_POOL: usize = 300;
const PHENOMENOLOGY_SEED: u64 = 1;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id:>2} [{status}] {name}: {detail}");
}

// Test-side recursion and decoder, independent of the library's.

fn oracle_outer(f: &dyn Backbone, x: &LatentTensor, h: &JointState, m: usize) -> JointState {
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + v).collect::<Vec<f64>>();
    let (rows, dim) = x.shape();
    let mut z = h.z.as_slice().to_vec();
    let xy = add(x.as_slice(), h.y.as_slice());
    for _ in 0..m {
        let input = LatentTensor::new(add(&xy, &z), rows, dim).unwrap();
        z = f.apply(&input).into_vec();
    }
    let input = LatentTensor::new(add(h.y.as_slice(), &z), rows, dim).unwrap();
    let y = f.apply(&input).into_vec();
    JointState {
        y: LatentTensor::new(y, rows, dim).unwrap(),
        z: LatentTensor::new(z, rows, dim).unwrap(),
    }
}

fn oracle_decode(y: &LatentTensor, classes: u32) -> Vec<u32> {
    (0..y.rows())
        .map(|i| {
            let row = &y.row(i)[..classes as usize];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32 + 1
        })
        .collect()
}

#[test]
fn c01_deterministic_limit() {
    let (n, m) = (48, 6);
    let mut mismatches = 0;
    let mut checked = 0;

    let latin = LatinTestbed::default();
    let dec = latin.decoder();
    for task in latin.generate(50, 11).unwrap() {
        let f = latin.backbone_for(&task).unwrap();
        let g = OracleGuide::new(task.solution.clone().unwrap(), 4.0, dec).unwrap();
        let (answer, _) = run_guided_inference(&InferenceConfig::deterministic(n, m), &f, &g, &dec, &task).unwrap();
        let mut h = task.h0.clone();
        for _ in 0..n {
            h = oracle_outer(&f, &task.x, &h, m);
        }
        checked += 1;
        mismatches += (answer.tokens() != oracle_decode(&h.y, 4).as_slice()) as usize;
    }

    let affine = AffineTestbed {
        rows: 4,
        dim: 4,
        classes: 3,
        rho: 0.45,
        scale: 1.0,
    };
    let f = affine.backbone(11).unwrap();
    let adec = gse_core::ArgmaxDecoder::new(3, 4).unwrap();
    let flat = FlatGuide::new(0.0, 0.01).unwrap();
    for task in affine.generate(50, 11).unwrap() {
        let config = InferenceConfig {
            beta: 0.25,
            ..InferenceConfig::deterministic(n, m)
        };
        let (answer, _) = run_guided_inference(&config, &f, &flat, &adec, &task).unwrap();
        let mut h = task.h0.clone();
        for _ in 0..n {
            h = oracle_outer(&f, &task.x, &h, m);
        }
        checked += 1;
        mismatches += (answer.tokens() != oracle_decode(&h.y, 3).as_slice()) as usize;
    }
    let pass = mismatches as f64 == BITWISE;
    verdict(1, "deterministic limit", pass, &format!("{mismatches} mismatches over {checked} tasks (Latin + affine)"));
    assert!(pass);
}

#[test]
fn c02_tube_bounds() {
    let mut violations = Vec::new();
    let mut checks = 0;
    let zero = LatentTensor::zeros(4, 4);
    for (i, &rho) in [0.5, 0.7, 0.9].iter().enumerate() {
        let f = gse_core::AffineBackbone::new(rho, LatentTensor::basis(4, 4, 3)).unwrap();
        for (j, &sigma) in [0.05, 0.1, 0.3].iter().enumerate() {
            let h = JointState::new(LatentTensor::basis(4, 4, 1), LatentTensor::basis(4, 4, 7)).unwrap();
            let stream = RngStream::new(2, i as u64, 0, j as u64);
            let rep = tube_statistics(&f, &zero, &h, 6, sigma, &[0.5, 1.0, 1.5], 10_000, &stream).unwrap();
            for r in &rep.radii {
                let radius = r.alpha * 4.0;
                for m in 1..=6usize {
                    let bound: f64 = sigma * sigma * 16.0 * (0..m).map(|k| rho.powi(2 * k as i32)).sum::<f64>();
                    let est = r.in_tube_second_moment[m - 1];
                    checks += 1;
                    if est > bound + TUBE_SE_ALLOWANCE * r.in_tube_se[m - 1] {
                        violations.push(format!("rho={rho} sigma={sigma} alpha={} m={m}: {est} > {bound}", r.alpha));
                    }
                }
                let exit = 1.0 - r.survival;
                let bound = 6.0 / (radius * radius) * sigma * sigma * 16.0 / (1.0 - rho * rho);
                checks += 1;
                if exit > bound + TUBE_SE_ALLOWANCE * r.survival_se {
                    violations.push(format!("rho={rho} sigma={sigma} alpha={}: exit {exit} > {bound}", r.alpha));
                }
            }
        }
    }
    let pass = violations.is_empty();
    verdict(2, "tube bounds", pass, &format!("{} violations of {checks} checks {violations:?}", violations.len()));
    assert!(pass);
}

/// Exact tilted law `p_t(i) ∝ p_i exp(t q_i)` computed from the atoms.
fn oracle_tilt(m: &DiscreteMeasure, t: f64) -> Vec<f64> {
    let a = m.atoms();
    let top = a.iter().map(|x| t * x.q).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = a.iter().map(|x| x.p * (t * x.q - top).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

fn measures(binary: bool) -> Vec<DiscreteMeasure> {
    (0..100u64)
        .map(|i| {
            let n = RngStream::new(31, i, 0, 0).rng().random_range(2..=20);
            DiscreteMeasure::random(n, binary, &RngStream::new(31, i, 1, binary as u64)).unwrap()
        })
        .collect()
}

fn t_grid() -> Vec<f64> {
    (0..10).map(|k| -2.0 + 4.0 * k as f64 / 9.0).collect()
}

#[test]
fn c03_tilt_derivative_identity() {
    let mut worst: f64 = 0.0;
    for m in measures(false) {
        for t in t_grid() {
            let w = oracle_tilt(&m, t);
            let a = m.atoms();
            let ephi: f64 = w.iter().zip(a).map(|(w, x)| w * x.phi).sum();
            let eq: f64 = w.iter().zip(a).map(|(w, x)| w * x.q).sum();
            let cov: f64 = w.iter().zip(a).map(|(w, x)| w * (x.phi - ephi) * (x.q - eq)).sum();
            let h = gse_core::diagnostics::FD_STEP;
            let fd = (m.expectation(t + h) - m.expectation(t - h)) / (2.0 * h);
            worst = worst.max((fd - cov).abs());
        }
    }
    let pass = worst < IDENTITY_TOL;
    verdict(3, "tilt derivative identity", pass, &format!("max |fd - cov| = {worst:.3e} over 100 measures x 10 points"));
    assert!(pass);
}

#[test]
fn c04_log_odds_identity() {
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    for m in measures(true) {
        for t in t_grid() {
            let w = oracle_tilt(&m, t);
            let p: f64 = w.iter().zip(m.atoms()).filter(|(_, a)| a.phi == 1.0).map(|(w, _)| w).sum();
            if !(p > LOG_ODDS_RANGE.0 && p < LOG_ODDS_RANGE.1) {
                continue;
            }
            let (mut s1, mut s0) = (0.0, 0.0);
            for (w, a) in w.iter().zip(m.atoms()) {
                if a.phi == 1.0 {
                    s1 += w * a.q;
                } else {
                    s0 += w * a.q;
                }
            }
            let delta = s1 / p - s0 / (1.0 - p);
            let check = log_odds_identity_check(&m, t).expect("both classes present");
            evaluated += 1;
            worst = worst.max((check.lhs - delta).abs());
        }
    }
    let pass = worst < IDENTITY_TOL && evaluated > 0;
    verdict(4, "log-odds identity", pass, &format!("max |d log-odds - gap| = {worst:.3e} at {evaluated} points"));
    assert!(pass);
}

#[test]
fn c05_q_spread_bound() {
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for m in measures(true) {
        let mass = |t: f64| -> f64 {
            oracle_tilt(&m, t).iter().zip(m.atoms()).filter(|(_, a)| a.phi == 1.0).map(|(w, _)| w).sum()
        };
        for beta in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let shift = (mass(beta) - mass(0.0)).abs();
            let bound = m.spread_bound(beta).bound;
            tightest = tightest.min(bound - shift);
            violations += (shift > bound) as usize;
        }
    }
    let pass = violations == 0;
    verdict(5, "q-spread bound", pass, &format!("{violations} violations over 100 measures x 5 betas, min slack {tightest:.3e}"));
    assert!(pass);
}

#[test]
fn c06_bce_alignment() {
    let uniform = bce_alignment_check(EtaDistribution::Uniform { low: 0.1, high: 0.9 }, f64::ln, 100_000, &RngStream::new(6, 0, 0, 0)).unwrap();
    let constant = bce_alignment_check(EtaDistribution::Constant { value: 0.4 }, f64::ln, 100_000, &RngStream::new(6, 1, 0, 0)).unwrap();
    let pass = uniform.covariance > 0.0 && uniform.z_score() >= BCE_Z_MIN && constant.covariance.abs() <= BCE_Z_MIN * constant.standard_error;
    verdict(
        6,
        "BCE alignment",
        pass,
        &format!(
            "uniform cov {:.4e} (z = {:.1}); constant cov {:.1e} (se {:.1e})",
            uniform.covariance,
            uniform.z_score(),
            constant.covariance,
            constant.standard_error
        ),
    );
    assert!(pass);
}

#[test]
fn c07_systematic_resampling() {
    let (mut worst_mean, mut worst_draw): (f64, f64) = (0.0, 0.0);
    for v in 0..20u64 {
        let mut rng = RngStream::new(7, v, 0, 0).rng();
        let s = rng.random_range(2..=64usize);
        let raw: Vec<f64> = (0..s).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
        let total: f64 = raw.iter().sum();
        let w = WeightVector::new(raw.iter().map(|x| x / total).collect()).unwrap();
        let mut mean = vec![0.0; s];
        for k in 0..1000 {
            let u = (k as f64 + 0.5) / 1000.0;
            let mut counts = vec![0.0; s];
            for a in systematic_resample(&w, u) {
                counts[a] += 1.0;
            }
            for j in 0..s {
                worst_draw = worst_draw.max((counts[j] - s as f64 * w.as_slice()[j]).abs());
                mean[j] += counts[j] / 1000.0;
            }
        }
        for j in 0..s {
            worst_mean = worst_mean.max((mean[j] - s as f64 * w.as_slice()[j]).abs());
        }
    }
    let pass = worst_mean <= RESAMPLE_MEAN_TOL && worst_draw < 1.0;
    verdict(7, "systematic resampling", pass, &format!("max mean error {worst_mean:.2e}, max per-draw error {worst_draw:.4}"));
    assert!(pass);
}

// ---------------------------------------------------------------- phenomenology

struct Experiment {
    dir: tempfile::TempDir,
    outcome: ExperimentOutcome,
}

fn phenomenology_plan(dir: &Path, guide: GuideSpec) -> ExperimentPlan {
    ExperimentPlan {
        pool: PoolSpec {
            size: PHENOMENOLOGY_POOL,
            seed: PHENOMENOLOGY_SEED,
            file: None,
        },
        guide,
        output_dir: dir.to_path_buf(),
        ..ExperimentPlan::default()
    }
}

fn run_plan(guide: GuideSpec) -> Experiment {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&phenomenology_plan(dir.path(), guide)).unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    Experiment { dir, outcome }
}

fn aligned() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| run_plan(GuideSpec::Oracle { kappa: 4.0 }))
}

fn flat() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| run_plan(GuideSpec::Flat { level: 0.0, jitter: 0.01 }))
}

fn row<'a>(rows: &'a [SummaryRow], split: &str) -> &'a SummaryRow {
    rows.iter().find(|r| r.split == split).unwrap()
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

#[test]
fn c08_aligned_guide_phenomenology() {
    let e = aligned();
    let test = row(&e.outcome.summary, "test");
    let df = row(&e.outcome.summary, "df");
    let p_det = test.deterministic_mean.unwrap();
    let (guided, unguided, oracle) = (df.guided_mean.unwrap(), df.unguided_mean.unwrap(), df.oracle_mean.unwrap());
    let pass = PHENOMENOLOGY_POOL >= 200
        && p_det > P_DET_RANGE.0
        && p_det < P_DET_RANGE.1
        && guided - unguided >= GUIDED_GAIN_MIN
        && (oracle - guided).abs() <= ORACLE_GAP_MAX;
    verdict(
        8,
        "aligned guide",
        pass,
        &format!(
            "pool {PHENOMENOLOGY_POOL}, p_det {}, DF n={}: guided {} vs unguided {} (gain {}), oracle {}",
            pct(p_det),
            df.instances,
            pct(guided),
            pct(unguided),
            pct(guided - unguided),
            pct(oracle)
        ),
    );
    assert!(pass);
}

fn runs_by_key(dir: &Path) -> BTreeMap<(RunMode, usize, usize, u64), TracedRun> {
    read_trace_dir(&dir.join(TRACE_DIR))
        .unwrap()
        .into_iter()
        .map(|r| ((r.mode, r.fold, r.seed, r.instance), r))
        .collect()
}

#[test]
fn c09_flat_guide_phenomenology() {
    let e = flat();
    let runs = runs_by_key(e.dir.path());
    let guided: Vec<&TracedRun> = runs.values().filter(|r| r.mode == RunMode::Guided).collect();
    let min_ess = guided
        .iter()
        .flat_map(|r| r.trace.steps.iter().map(|s| s.ess_ratio))
        .fold(f64::INFINITY, f64::min);
    let resamples: usize = guided.iter().map(|r| r.trace.resample_count()).sum();
    let opts = DiagnoseOptions {
        tube_instances: 0,
        ..DiagnoseOptions::default()
    };
    let cap = diagnose(e.dir.path(), &opts).unwrap().points[0].alignment.spread_cap_percent;
    let mut agree = 0;
    for r in &guided {
        let u = &runs[&(RunMode::Unguided, r.fold, r.seed, r.instance)];
        agree += (u.answer == r.answer) as usize;
    }
    let test = row(&e.outcome.summary, "test");
    let (g, u) = (test.guided_mean.unwrap(), test.unguided_mean.unwrap());

    let ess_ok = min_ess >= FLAT_ESS_MIN;
    let resample_ok = resamples == 0;
    let cap_ok = cap < FLAT_SPREAD_CAP_PERCENT;
    let map_ok = agree == guided.len();
    let pass = ess_ok && resample_ok && cap_ok && map_ok;
    verdict(
        9,
        "flat guide",
        pass,
        &format!(
            "min ESS/S {min_ess:.6} ({}), resampling events {resamples} ({}), spread cap {cap:.4}% ({}), \
             guided MAP = unguided on {agree}/{} matched runs ({}); test rates guided {} vs unguided {}",
            ok(ess_ok),
            ok(resample_ok),
            ok(cap_ok),
            guided.len(),
            ok(map_ok),
            pct(g),
            pct(u)
        ),
    );
    assert!(ess_ok && resample_ok && cap_ok, "label-free flat-guide checks");
    assert!(map_ok, "guided MAP differs from unguided on {} of {} runs", guided.len() - agree, guided.len());
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

#[test]
fn c10_entropy_diagnostics() {
    let e = aligned();
    let opts = DiagnoseOptions {
        tube_instances: 0,
        ..DiagnoseOptions::default()
    };
    let b = diagnose(e.dir.path(), &opts).unwrap();
    let en = &b.points[0].entropy;
    let auroc = en.auroc.unwrap_or(f64::NAN);
    let ci = en.auroc_interval;
    let ab = en.abstention.unwrap();
    let pass = auroc > 0.5 && ci.is_some_and(|c| c.low > 0.5) && ab.retained_accuracy > ab.unconditional_accuracy;
    verdict(
        10,
        "entropy diagnostics",
        pass,
        &format!(
            "AUROC {auroc:.3} CI {:?} over {} free tokens ({} errors); abstaining on {} tokens: {} -> {}",
            ci.map(|c| (c.low, c.high)),
            en.tokens,
            en.errors,
            ab.abstained,
            pct(ab.unconditional_accuracy),
            pct(ab.retained_accuracy)
        ),
    );
    assert!(pass);
}

#[test]
fn c11_reproducibility() {
    let small = |dir: &Path, workers: usize| ExperimentPlan {
        pool: PoolSpec {
            size: 40,
            seed: 9,
            file: None,
        },
        inference: InferenceConfig {
            particles: 8,
            outer_steps: 24,
            ..InferenceConfig::default()
        },
        sweep: gse_core::harness::SweepSpec {
            beta: vec![0.0, 0.25],
            ..Default::default()
        },
        n_seeds: 2,
        n_folds: 3,
        workers,
        compress_traces: workers > 1,
        output_dir: dir.to_path_buf(),
        ..ExperimentPlan::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small(a.path(), 1)).unwrap();
    run_experiment(&small(b.path(), 3)).unwrap();
    let sa = std::fs::read(a.path().join("summary.csv")).unwrap();
    let sb = std::fs::read(b.path().join("summary.csv")).unwrap();
    let identical = sa == sb;

    let mut diffs = 0;
    let mut runs = 0;
    for dir in [a.path(), b.path(), aligned().dir.path(), flat().dir.path()] {
        let r = verify(dir).unwrap();
        diffs += r.result_mismatches.len() + r.summary_diffs.len();
        runs += r.runs;
    }
    let rerun = run_experiment(&phenomenology_plan(&aligned().dir.path().join("rerun"), GuideSpec::Oracle { kappa: 4.0 })).unwrap();
    let first = std::fs::read(aligned().dir.path().join("summary.csv")).unwrap();
    let second = std::fs::read(aligned().dir.path().join("rerun").join("summary.csv")).unwrap();
    let rerun_identical = first == second && rerun.summary == aligned().outcome.summary;

    let pass = identical && rerun_identical && diffs == 0;
    verdict(
        11,
        "reproducibility",
        pass,
        &format!(
            "summary bitwise equal across reruns/worker counts: {identical}, full-pool rerun: {rerun_identical}; \
             verify: {diffs} diffs over {runs} runs"
        ),
    );
    assert!(pass);
}

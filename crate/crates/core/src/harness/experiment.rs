use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{self, Pool, PoolHeader, RunMode, SummaryRow, TracedRun};
use super::{ExperimentPlan, TestbedSpec};
use crate::error::{Error, Result};
use crate::filter::{run_guided_inference, InferenceConfig};
use crate::rng::{RngStream, GENERATOR_TAG};
use crate::state::TokenGrid;

pub const POOL_FILE: &str = "pool.jsonl";
pub const PLAN_FILE: &str = "plan.toml";
pub const FOLDS_FILE: &str = "folds.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.json";
pub const TRACE_DIR: &str = "traces";

/// One inference configuration of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub config: InferenceConfig,
}

/// Instance ids held out for validation and the test folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub validation: Vec<u64>,
    pub folds: Vec<Vec<u64>>,
}

/// Shuffles `ids` with `seed`, holds out the leading `validation_fraction`,
/// and deals the rest round-robin into `n_folds` disjoint folds.
pub fn assign_folds(ids: &[u64], n_folds: usize, validation_fraction: f64, seed: u64) -> Result<FoldAssignment> {
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut RngStream::new(seed, GENERATOR_TAG, 3, 0).rng());
    let n_val = (validation_fraction * order.len() as f64).floor() as usize;
    let test = &order[n_val..];
    if n_folds == 0 || test.len() < n_folds {
        return Err(Error::config(format!(
            "{} test instances cannot fill {n_folds} folds",
            test.len()
        )));
    }
    let mut folds = vec![Vec::new(); n_folds];
    for (i, &id) in test.iter().enumerate() {
        folds[i % n_folds].push(id);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    let mut validation = order[..n_val].to_vec();
    validation.sort_unstable();
    Ok(FoldAssignment { validation, folds })
}

/// Generates a pool; Latin pools also pass the step-size check for the
/// given recursion depth.
pub fn generate_pool(testbed: &TestbedSpec, size: usize, seed: u64, config: &InferenceConfig) -> Result<Pool> {
    testbed.validate()?;
    let tasks = testbed.generate(size, seed)?;
    if let TestbedSpec::Latin(t) = testbed {
        t.validate_step_size(&tasks, config.outer_steps, config.inner_steps)?;
    }
    Ok(Pool {
        header: PoolHeader {
            testbed: testbed.clone(),
            seed,
            size,
        },
        tasks,
    })
}

/// The plan's pool, read from `pool.file` or generated.
pub fn load_pool(plan: &ExperimentPlan) -> Result<Pool> {
    match &plan.pool.file {
        Some(path) => {
            let pool = Pool::read(path)?;
            if pool.header.testbed != plan.testbed {
                return Err(Error::config(format!(
                    "pool file {} was built for a different testbed",
                    path.display()
                )));
            }
            Ok(pool)
        }
        None => generate_pool(&plan.testbed, plan.pool.size, plan.pool.seed, &plan.inference),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub point: usize,
    pub fold: usize,
    pub seed: usize,
    pub mode: RunMode,
    pub instance: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<CellFailure>,
    pub trace_files: Vec<PathBuf>,
}

struct Job {
    point: usize,
    fold: usize,
    seed: usize,
    mode: RunMode,
    config: InferenceConfig,
}

impl Job {
    fn file_name(&self, compress: bool) -> String {
        let ext = if compress { "jsonl.gz" } else { "jsonl" };
        match self.mode {
            RunMode::Deterministic => format!("p{}_f{}_{}.{ext}", self.point, self.fold, self.mode.as_str()),
            m => format!("p{}_f{}_s{}_{}.{ext}", self.point, self.fold, self.seed, m.as_str()),
        }
    }
}

fn jobs(plan: &ExperimentPlan) -> Vec<Job> {
    let mut out = Vec::new();
    for p in plan.points() {
        for fold in 0..plan.n_folds {
            out.push(Job {
                point: p.index,
                fold,
                seed: 0,
                mode: RunMode::Deterministic,
                config: InferenceConfig {
                    record_inner_deviation: p.config.record_inner_deviation,
                    seed: p.config.seed,
                    ..InferenceConfig::deterministic(p.config.outer_steps, p.config.inner_steps)
                },
            });
            for seed in 0..plan.n_seeds {
                let guided = InferenceConfig {
                    seed: p.config.seed.wrapping_add(seed as u64),
                    ..p.config.clone()
                };
                out.push(Job {
                    point: p.index,
                    fold,
                    seed,
                    mode: RunMode::Unguided,
                    config: InferenceConfig {
                        beta: 0.0,
                        ..guided.clone()
                    },
                });
                out.push(Job {
                    point: p.index,
                    fold,
                    seed,
                    mode: RunMode::Guided,
                    config: guided,
                });
            }
        }
    }
    out
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs every (point, fold, seed) cell and writes `pool.jsonl`, `plan.toml`,
/// `folds.json`, one trace file per cell and mode, `summary.csv` and
/// `failures.json` under the plan's output directory. Cell failures are
/// returned, not raised; the summary covers the cells that completed.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let pool = load_pool(plan)?;
    if let Some(t) = pool.tasks.iter().find(|t| t.solution.is_none()) {
        return Err(Error::config(format!(
            "instance {} has no ground-truth solution; solve rates need one",
            t.id
        )));
    }
    let ids: Vec<u64> = pool.tasks.iter().map(|t| t.id).collect();
    let folds = assign_folds(&ids, plan.n_folds, plan.validation_fraction, pool.header.seed)?;
    let dir = &plan.output_dir;
    let trace_dir = dir.join(TRACE_DIR);
    if trace_dir.exists() {
        std::fs::remove_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
    }
    create_dir(&trace_dir)?;
    pool.write(&dir.join(POOL_FILE))?;
    io::write_text(&dir.join(PLAN_FILE), &plan.to_toml()?)?;
    let folds_json = serde_json::to_string_pretty(&folds).map_err(|e| Error::parse(e.to_string()))?;
    io::write_text(&dir.join(FOLDS_FILE), &folds_json)?;

    let decoder = plan.testbed.decoder()?;
    let by_id: BTreeMap<u64, &crate::backbone::TaskInstance> = pool.tasks.iter().map(|t| (t.id, t)).collect();
    let jobs = jobs(plan);
    let results: Vec<(Option<PathBuf>, Vec<CellFailure>)> = thread_pool(plan.workers)?.install(|| {
        jobs.par_iter()
            .map(|job| -> Result<(Option<PathBuf>, Vec<CellFailure>)> {
                let mut runs = Vec::new();
                let mut failures = Vec::new();
                for &id in &folds.folds[job.fold] {
                    let task = by_id[&id];
                    let attempt = plan
                        .testbed
                        .backbone_for(task, pool.header.seed)
                        .and_then(|b| Ok((b, plan.guide.build(task, &decoder)?)))
                        .and_then(|(b, g)| run_guided_inference(&job.config, &*b, &*g, &decoder, task));
                    match attempt {
                        Ok((answer, trace)) => {
                            let solution = task.solution.as_ref();
                            runs.push(TracedRun {
                                run: format!("p{}_f{}_s{}_{}_i{}", job.point, job.fold, job.seed, job.mode.as_str(), id),
                                instance: id,
                                point: job.point,
                                fold: job.fold,
                                seed: job.seed,
                                mode: job.mode,
                                classes: decoder.classes(),
                                config: job.config.clone(),
                                solved: solution.map(|s| *s == answer),
                                oracle: solution.map(|s| trace.oracle_hit(s)),
                                answer,
                                trace,
                            });
                        }
                        Err(e) => failures.push(CellFailure {
                            point: job.point,
                            fold: job.fold,
                            seed: job.seed,
                            mode: job.mode,
                            instance: id,
                            error: e.to_string(),
                        }),
                    }
                }
                if !failures.is_empty() {
                    return Ok((None, failures));
                }
                let path = trace_dir.join(job.file_name(plan.compress_traces));
                io::write_traces(&path, &runs)?;
                Ok((Some(path), failures))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut trace_files = Vec::new();
    let mut failures = Vec::new();
    for (path, f) in results {
        trace_files.extend(path);
        failures.extend(f);
    }
    let failures_json = serde_json::to_string_pretty(&failures).map_err(|e| Error::parse(e.to_string()))?;
    io::write_text(&dir.join(FAILURES_FILE), &failures_json)?;
    let summary = summarize(&read_trace_dir(&trace_dir)?, &pool)?;
    io::write_text(&dir.join(SUMMARY_FILE), &io::summary_to_csv(&summary)?)?;
    trace_files.sort();
    Ok(ExperimentOutcome {
        summary,
        failures,
        trace_files,
    })
}

/// [`run_experiment`] for a plan that sweeps at least one axis.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    if plan.sweep.is_empty() {
        return Err(Error::config("sweep needs at least one non-empty axis"));
    }
    run_experiment(plan)
}

/// Every run in a trace directory, in a canonical order.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<TracedRun>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".jsonl") || name.ends_with(".jsonl.gz")
        })
        .collect();
    files.sort();
    let mut runs = Vec::new();
    for f in files {
        runs.extend(io::read_traces(&f)?);
    }
    runs.sort_by(|a, b| {
        (a.point, a.fold, a.seed, a.mode, a.instance).cmp(&(b.point, b.fold, b.seed, b.mode, b.instance))
    });
    Ok(runs)
}

struct Outcome {
    solved: bool,
    oracle: bool,
}

fn recompute(run: &TracedRun, solution: &TokenGrid) -> Result<Outcome> {
    let map = run
        .trace
        .map_answer()
        .ok_or_else(|| Error::parse(format!("run {} has no steps", run.run)))?;
    Ok(Outcome {
        solved: map == *solution,
        oracle: run.trace.oracle_hit(solution),
    })
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

/// Summary rows (one per point and split) recomputed from traces: MAP
/// answers and oracle hits are rederived from the step records. The `df`
/// split keeps instances the deterministic run of the same point failed.
/// Rates are means and sample standard deviations over cells: `(fold, seed)`
/// for the stochastic modes, folds for the deterministic baseline.
pub fn summarize(runs: &[TracedRun], pool: &Pool) -> Result<Vec<SummaryRow>> {
    let solutions: BTreeMap<u64, &TokenGrid> = pool
        .tasks
        .iter()
        .filter_map(|t| t.solution.as_ref().map(|s| (t.id, s)))
        .collect();
    let mut by_point: BTreeMap<usize, Vec<&TracedRun>> = BTreeMap::new();
    for r in runs {
        by_point.entry(r.point).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (point, runs) in by_point {
        let Some(axis) = runs.iter().find(|r| r.mode == RunMode::Guided).map(|r| &r.config) else {
            continue;
        };
        let mut outcomes = Vec::with_capacity(runs.len());
        for r in &runs {
            let sol = solutions
                .get(&r.instance)
                .ok_or_else(|| Error::parse(format!("run {} names an instance without a solution", r.run)))?;
            outcomes.push((*r, recompute(r, sol)?));
        }
        let df: BTreeSet<u64> = outcomes
            .iter()
            .filter(|(r, o)| r.mode == RunMode::Deterministic && !o.solved)
            .map(|(r, _)| r.instance)
            .collect();
        for split in ["test", "df"] {
            let in_split = |id: u64| split == "test" || df.contains(&id);
            // (mode, fold, seed) -> (solved, oracle, count)
            let mut cells: BTreeMap<(RunMode, usize, usize), (usize, usize, usize)> = BTreeMap::new();
            let mut instances = BTreeSet::new();
            for (r, o) in &outcomes {
                if !in_split(r.instance) {
                    continue;
                }
                if r.mode == RunMode::Guided {
                    instances.insert(r.instance);
                }
                let c = cells.entry((r.mode, r.fold, r.seed)).or_default();
                c.0 += o.solved as usize;
                c.1 += o.oracle as usize;
                c.2 += 1;
            }
            let rates = |mode: RunMode, oracle: bool| -> Vec<f64> {
                cells
                    .iter()
                    .filter(|((m, _, _), _)| *m == mode)
                    .map(|(_, &(s, o, n))| if oracle { o } else { s } as f64 / n as f64)
                    .collect()
            };
            let guided = rates(RunMode::Guided, false);
            let (deterministic_mean, deterministic_sd) = mean_sd(&rates(RunMode::Deterministic, false));
            let (unguided_mean, unguided_sd) = mean_sd(&rates(RunMode::Unguided, false));
            let (oracle_mean, oracle_sd) = mean_sd(&rates(RunMode::Guided, true));
            let (guided_mean, guided_sd) = mean_sd(&guided);
            rows.push(SummaryRow {
                point,
                sigma: axis.sigma,
                beta: axis.beta,
                particles: axis.particles,
                tau_ess: axis.tau_ess,
                resample: axis.resample,
                outer_steps: axis.outer_steps,
                inner_steps: axis.inner_steps,
                split: split.to_string(),
                instances: instances.len(),
                cells: guided.len(),
                deterministic_mean,
                deterministic_sd,
                unguided_mean,
                unguided_sd,
                oracle_mean,
                oracle_sd,
                guided_mean,
                guided_sd,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub runs: usize,
    /// Runs whose recorded answer or flags disagree with the steps.
    pub result_mismatches: Vec<String>,
    /// Summary lines that differ from the recomputation.
    pub summary_diffs: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.result_mismatches.is_empty() && self.summary_diffs.is_empty()
    }
}

/// Recomputes every summary number of an output directory from its traces
/// and pool and diffs against `summary.csv`.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let pool = Pool::read(&dir.join(POOL_FILE))?;
    let runs = read_trace_dir(&dir.join(TRACE_DIR))?;
    let mut report = VerifyReport {
        runs: runs.len(),
        ..VerifyReport::default()
    };
    for r in &runs {
        let map = r.trace.map_answer();
        if map.as_ref() != Some(&r.answer) {
            report
                .result_mismatches
                .push(format!("{}: recorded answer {} but steps give {:?}", r.run, r.answer, map.map(|m| m.to_string())));
        }
        let sol = pool.tasks.iter().find(|t| t.id == r.instance).and_then(|t| t.solution.as_ref());
        if let Some(sol) = sol {
            let o = recompute(r, sol)?;
            if r.solved != Some(o.solved) || r.oracle != Some(o.oracle) {
                report.result_mismatches.push(format!("{}: solved/oracle flags disagree with steps", r.run));
            }
        }
    }
    let expected = io::summary_to_csv(&summarize(&runs, &pool)?)?;
    let path = dir.join(SUMMARY_FILE);
    let actual = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    io::parse_summary(&actual)?;
    let (e, a): (Vec<&str>, Vec<&str>) = (expected.lines().collect(), actual.lines().collect());
    for i in 0..e.len().max(a.len()) {
        let (x, y) = (e.get(i).copied().unwrap_or(""), a.get(i).copied().unwrap_or(""));
        if x != y {
            report.summary_diffs.push(format!("line {}: expected {x:?}, found {y:?}", i + 1));
        }
    }
    Ok(report)
}

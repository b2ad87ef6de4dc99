//! Experiment runner: plans, seed-by-fold grids, sweeps, trace files,
//! summaries and the diagnostics bundle.

mod diagnose;
mod experiment;
pub mod io;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use diagnose::{
    diagnose, diagnose_runs, read_diagnostics, render_report, write_diagnostics, AlignmentSummary, DiagnoseOptions,
    DiagnosticsBundle, EntropySummary, InstanceDiagnostics, PointDiagnostics, Verdict, DIAGNOSTICS_FILE, REPORT_FILE,
};
pub use experiment::{
    assign_folds, generate_pool, load_pool, read_trace_dir, run_experiment, run_sweep, summarize, verify,
    CellFailure, ExperimentOutcome, FoldAssignment, SweepPoint, VerifyReport, FAILURES_FILE, FOLDS_FILE, PLAN_FILE,
    POOL_FILE, SUMMARY_FILE, TRACE_DIR,
};
pub use io::{Pool, PoolHeader, RunMode, SummaryRow, TracedRun};

use crate::backbone::{AffineTestbed, Backbone, LatinTestbed, TaskInstance};
use crate::error::{Error, Result};
use crate::filter::InferenceConfig;
use crate::guide::{FlatGuide, Guide, OracleGuide, DEFAULT_FLAT_JITTER};
use crate::state::ArgmaxDecoder;

/// Upper limit on the Cartesian product of sweep axes.
pub const MAX_SWEEP_POINTS: usize = 10_000;

/// Which synthetic task family a plan runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestbedSpec {
    Latin(LatinTestbed),
    Affine(AffineTestbed),
}

impl Default for TestbedSpec {
    fn default() -> Self {
        TestbedSpec::Latin(LatinTestbed::default())
    }
}

impl TestbedSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TestbedSpec::Latin(t) => t.validate(),
            TestbedSpec::Affine(t) => t.validate(),
        }
    }

    /// Latent shape `(L, D)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            TestbedSpec::Latin(t) => (t.params.cells(), t.params.dim),
            TestbedSpec::Affine(t) => (t.rows, t.dim),
        }
    }

    pub fn classes(&self) -> u32 {
        match self {
            TestbedSpec::Latin(t) => t.params.order as u32,
            TestbedSpec::Affine(t) => t.classes,
        }
    }

    pub fn decoder(&self) -> Result<ArgmaxDecoder> {
        let (_, d) = self.shape();
        ArgmaxDecoder::new(self.classes(), d)
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
        match self {
            TestbedSpec::Latin(t) => t.generate(count, seed),
            TestbedSpec::Affine(t) => t.generate(count, seed),
        }
    }

    /// The backbone for one task of a pool generated with `pool_seed`.
    pub fn backbone_for(&self, task: &TaskInstance, pool_seed: u64) -> Result<Box<dyn Backbone>> {
        Ok(match self {
            TestbedSpec::Latin(t) => Box::new(t.backbone_for(task)?),
            TestbedSpec::Affine(t) => Box::new(t.backbone(pool_seed)?),
        })
    }
}

/// Guide used by the guided runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuideSpec {
    /// Scores agreement with the ground truth; needs solutions.
    Oracle {
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
    /// Constant logit plus a small state hash.
    Flat {
        #[serde(default)]
        level: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
}

fn default_kappa() -> f64 {
    4.0
}

fn default_jitter() -> f64 {
    DEFAULT_FLAT_JITTER
}

impl Default for GuideSpec {
    fn default() -> Self {
        GuideSpec::Oracle { kappa: default_kappa() }
    }
}

impl GuideSpec {
    pub fn build(&self, task: &TaskInstance, decoder: &ArgmaxDecoder) -> Result<Box<dyn Guide>> {
        Ok(match self {
            GuideSpec::Oracle { kappa } => {
                let solution = task.solution.clone().ok_or_else(|| {
                    Error::config(format!("oracle guide needs a solution for instance {}", task.id))
                })?;
                Box::new(OracleGuide::new(solution, *kappa, *decoder)?)
            }
            GuideSpec::Flat { level, jitter } => Box::new(FlatGuide::new(*level, *jitter)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSpec {
    pub size: usize,
    pub seed: u64,
    /// Load this pool file instead of generating one.
    pub file: Option<PathBuf>,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            size: 240,
            seed: 0,
            file: None,
        }
    }
}

/// Sweep axes; an empty list keeps the base inference value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub sigma: Vec<f64>,
    pub beta: Vec<f64>,
    pub particles: Vec<usize>,
    pub tau_ess: Vec<f64>,
    pub resample: Vec<bool>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
            && self.beta.is_empty()
            && self.particles.is_empty()
            && self.tau_ess.is_empty()
            && self.resample.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub testbed: TestbedSpec,
    pub pool: PoolSpec,
    pub guide: GuideSpec,
    pub inference: InferenceConfig,
    pub sweep: SweepSpec,
    pub n_seeds: usize,
    pub n_folds: usize,
    /// Leading share of the shuffled pool held out for tuning.
    pub validation_fraction: f64,
    pub output_dir: PathBuf,
    /// Parallel cells; 0 uses every core.
    pub workers: usize,
    pub compress_traces: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            testbed: TestbedSpec::default(),
            pool: PoolSpec::default(),
            guide: GuideSpec::default(),
            inference: InferenceConfig::default(),
            sweep: SweepSpec::default(),
            n_seeds: 5,
            n_folds: 5,
            validation_fraction: 0.1,
            output_dir: PathBuf::from("gse-out"),
            workers: 0,
            compress_traces: false,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::config(format!("plan: {e}")))?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("plan: {e}")))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.testbed.validate()?;
        self.inference.validate()?;
        if self.n_seeds == 0 || self.n_folds == 0 {
            return Err(Error::config("n_seeds and n_folds must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        if self.pool.file.is_none() && self.pool.size == 0 {
            return Err(Error::config("pool size must be >= 1"));
        }
        let count = [
            self.sweep.sigma.len(),
            self.sweep.beta.len(),
            self.sweep.particles.len(),
            self.sweep.tau_ess.len(),
            self.sweep.resample.len(),
        ]
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n.max(1)));
        if count.is_none_or(|c| c > MAX_SWEEP_POINTS) {
            return Err(Error::config(format!("sweep exceeds {MAX_SWEEP_POINTS} points")));
        }
        for p in self.points() {
            p.config.validate()?;
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes, in axis order
    /// `sigma, beta, particles, tau_ess, resample` (last varies fastest).
    pub fn points(&self) -> Vec<SweepPoint> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let b = &self.inference;
        let mut out = Vec::new();
        for &sigma in &axis(&self.sweep.sigma, b.sigma) {
            for &beta in &axis(&self.sweep.beta, b.beta) {
                for &particles in &axis(&self.sweep.particles, b.particles) {
                    for &tau_ess in &axis(&self.sweep.tau_ess, b.tau_ess) {
                        for &resample in &axis(&self.sweep.resample, b.resample) {
                            out.push(SweepPoint {
                                index: out.len(),
                                config: InferenceConfig {
                                    sigma,
                                    beta,
                                    particles,
                                    tau_ess,
                                    resample,
                                    ..b.clone()
                                },
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_defaults_and_toml_round_trip() {
        let plan = ExperimentPlan::from_toml("").unwrap();
        assert_eq!(plan, ExperimentPlan::default());
        assert_eq!(plan.inference.particles, 16);
        assert_eq!(plan.inference.outer_steps, 48);
        assert_eq!((plan.inference.sigma, plan.inference.beta, plan.inference.tau_ess), (0.3, 0.25, 0.3));
        let text = plan.to_toml().unwrap();
        assert_eq!(ExperimentPlan::from_toml(&text).unwrap(), plan);
    }

    #[test]
    fn plan_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentPlan::from_toml("n_sedes = 3").is_err());
        assert!(ExperimentPlan::from_toml("[inference]\nsigmaa = 1.0").is_err());
        let plan = ExperimentPlan::from_toml("[inference]\ntau_ess = 0.0").unwrap();
        assert!(plan.validate().unwrap_err().is_config());
        let plan = ExperimentPlan::from_toml("[sweep]\nbeta = [-1.0]").unwrap();
        assert!(plan.validate().is_err());
    }

    #[test]
    fn testbed_and_guide_tags() {
        let plan = ExperimentPlan::from_toml(
            "[testbed]\nkind = \"affine\"\nrows = 4\ndim = 4\nclasses = 3\nrho = 0.5\n\n[guide]\nkind = \"flat\"\n",
        )
        .unwrap();
        assert!(matches!(plan.testbed, TestbedSpec::Affine(AffineTestbed { rows: 4, .. })));
        assert_eq!(plan.guide, GuideSpec::Flat { level: 0.0, jitter: 0.01 });
        let latin = ExperimentPlan::from_toml("[testbed]\nkind = \"latin\"\norder = 3\ndim = 3\n").unwrap();
        match latin.testbed {
            TestbedSpec::Latin(t) => assert_eq!((t.params.order, t.clues_min), (3, 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_points_are_a_product() {
        let plan = ExperimentPlan::from_toml("[sweep]\nbeta = [0.0, 0.5]\nparticles = [2, 4, 8]\n").unwrap();
        let pts = plan.points();
        assert_eq!(pts.len(), 6);
        assert_eq!((pts[0].config.beta, pts[0].config.particles), (0.0, 2));
        assert_eq!((pts[5].config.beta, pts[5].config.particles), (0.5, 8));
        assert!(pts.iter().all(|p| p.config.sigma == 0.3));
        assert_eq!(ExperimentPlan::default().points().len(), 1);
    }
}

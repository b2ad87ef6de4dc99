use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gse_core::harness::{
    self, generate_pool, io::parse_summary, io::read_to_string, read_diagnostics, render_report, verify,
    write_diagnostics, DiagnoseOptions, ExperimentOutcome, ExperimentPlan, DIAGNOSTICS_FILE, REPORT_FILE,
    SUMMARY_FILE,
};
use gse_core::InferenceConfig;

#[derive(Parser)]
#[command(name = "gse", version, about = "Guided stochastic exploration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a testbed pool file.
    Generate(GenerateArgs),
    /// Run a plan's seed-by-fold grid.
    Run(RunArgs),
    /// Run a plan over its sweep axes.
    Sweep(RunArgs),
    /// Compute diagnostics from an output directory's traces.
    Diagnose(DiagnoseArgs),
    /// Recompute the summary from traces and diff.
    Verify(DirArgs),
    /// Print the markdown report for an output directory.
    Report(DirArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Plan whose testbed and pool settings to use.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output pool file (`.gz` compresses).
    #[arg(long, short)]
    out: PathBuf,
}

/// Overrides for the plan's base inference configuration.
#[derive(Args, Default)]
struct InferenceArgs {
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    outer_steps: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau_ess: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resample: Option<bool>,
    #[arg(long)]
    record_inner_deviation: Option<bool>,
}

impl InferenceArgs {
    fn apply(&self, c: &mut InferenceConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(particles, outer_steps, inner_steps, sigma, beta, tau_ess, seed, resample, record_inner_deviation);
    }
}

#[derive(Args)]
struct RunArgs {
    /// Plan file (TOML); defaults apply without one.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = "GSE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DirArgs {
    #[arg(long, env = "GSE_OUTPUT_DIR")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, env = "GSE_OUTPUT_DIR")]
    output_dir: PathBuf,
    #[arg(long)]
    tube_instances: Option<usize>,
    #[arg(long)]
    tube_rollouts: Option<usize>,
    #[arg(long)]
    bootstrap_replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => Ok(ExperimentPlan::read(p)?),
        None => Ok(ExperimentPlan::default()),
    }
}

fn print_outcome(out: &ExperimentOutcome) {
    print!("{}", render_report(&out.summary, None));
    for f in &out.failures {
        eprintln!(
            "cell failed: point {} fold {} seed {} {} instance {}: {}",
            f.point,
            f.fold,
            f.seed,
            f.mode.as_str(),
            f.instance,
            f.error
        );
    }
}

fn run(args: &RunArgs, sweep: bool) -> Result<bool> {
    let mut plan = load_plan(args.plan.as_deref())?;
    args.inference.apply(&mut plan.inference);
    if let Some(w) = args.workers {
        plan.workers = w;
    }
    if let Some(d) = &args.output_dir {
        plan.output_dir = d.clone();
    }
    let out = if sweep {
        harness::run_sweep(&plan)?
    } else {
        harness::run_experiment(&plan)?
    };
    print_outcome(&out);
    eprintln!("wrote {} trace files to {}", out.trace_files.len(), plan.output_dir.display());
    Ok(out.failures.is_empty())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => {
            let plan = load_plan(a.plan.as_deref())?;
            let size = a.size.unwrap_or(plan.pool.size);
            let seed = a.seed.unwrap_or(plan.pool.seed);
            let pool = generate_pool(&plan.testbed, size, seed, &plan.inference)?;
            pool.write(&a.out)?;
            eprintln!("wrote {} instances to {}", pool.tasks.len(), a.out.display());
            Ok(true)
        }
        Command::Run(a) => run(&a, false),
        Command::Sweep(a) => run(&a, true),
        Command::Diagnose(a) => {
            let mut opts = DiagnoseOptions::default();
            if let Some(v) = a.tube_instances {
                opts.tube_instances = v;
            }
            if let Some(v) = a.tube_rollouts {
                opts.tube_rollouts = v;
            }
            if let Some(v) = a.bootstrap_replicates {
                opts.bootstrap_replicates = v;
            }
            if let Some(v) = a.seed {
                opts.seed = v;
            }
            let bundle = harness::diagnose(&a.output_dir, &opts)?;
            write_diagnostics(&a.output_dir, &bundle)?;
            for p in &bundle.points {
                println!("point {}: {}", p.point, p.alignment.readout);
            }
            Ok(true)
        }
        Command::Verify(a) => {
            let r = verify(&a.output_dir)?;
            for m in r.result_mismatches.iter().chain(&r.summary_diffs) {
                println!("{m}");
            }
            println!(
                "{} runs checked; {} result mismatches; {} summary diffs",
                r.runs,
                r.result_mismatches.len(),
                r.summary_diffs.len()
            );
            Ok(r.is_clean())
        }
        Command::Report(a) => {
            let dir = &a.output_dir;
            let summary = parse_summary(&read_to_string(&dir.join(SUMMARY_FILE))?)?;
            let diag_path = dir.join(DIAGNOSTICS_FILE);
            let bundle = if diag_path.exists() {
                Some(read_diagnostics(&diag_path)?)
            } else {
                None
            };
            let text = render_report(&summary, bundle.as_ref());
            let path = dir.join(REPORT_FILE);
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            print!("{text}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<gse_core::Error>().is_some_and(|e| e.is_config());
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

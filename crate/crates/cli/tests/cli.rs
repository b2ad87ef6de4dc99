use std::path::Path;
use std::process::{Command, Output};

fn gse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gse"))
        .args(args)
        .env_remove("GSE_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_plan(dir: &Path, extra: &str) -> String {
    let path = dir.join("plan.toml");
    let text = format!(
        "n_seeds = 2\nn_folds = 2\n\n[pool]\nsize = 16\nseed = 4\n\n[inference]\nparticles = 4\nouter_steps = 10\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_verify_diagnose_report() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "");
    let out = d.path().join("out");
    let out_s = out.to_str().unwrap();

    let r = gse(&["run", "--plan", &plan, "--output-dir", out_s, "--sigma", "0.2", "--workers", "2"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("| 0 | 0.2 |"));
    assert!(out.join("summary.csv").exists());

    let r = gse(&["verify", "--output-dir", out_s]);
    assert_eq!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stdout).contains("0 result mismatches; 0 summary diffs"));

    let r = gse(&[
        "diagnose",
        "--output-dir",
        out_s,
        "--tube-instances",
        "1",
        "--tube-rollouts",
        "50",
        "--bootstrap-replicates",
        "50",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("diagnostics.json").exists());

    let r = gse(&["report", "--output-dir", out_s]);
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("## Diagnostics") && text.contains("caps mass shift"));
}

#[test]
fn tampered_summary_fails_verify() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "");
    let out = d.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(gse(&["run", "--plan", &plan, "--output-dir", out_s]).status.code(), Some(0));
    let path = out.join("summary.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(String::from).collect();
    fields[9] = "999".into();
    lines[1] = fields.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let r = gse(&["verify", "--output-dir", out_s]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "");
    let out = d.path().join("env-out");
    let r = Command::new(env!("CARGO_BIN_EXE_gse"))
        .args(["run", "--plan", &plan])
        .env("GSE_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let out_s = out.to_str().unwrap();
    let bad = write_plan(d.path(), "tau_ess = 1.5\n");
    assert_eq!(gse(&["run", "--plan", &bad, "--output-dir", out_s]).status.code(), Some(2));
    let plan = write_plan(d.path(), "");
    assert_eq!(gse(&["sweep", "--plan", &plan, "--output-dir", out_s]).status.code(), Some(2));
    assert_eq!(gse(&["run", "--plan", &plan, "--output-dir", out_s, "--particles", "0"]).status.code(), Some(2));
    assert_eq!(gse(&["run", "--bogus"]).status.code(), Some(2));
    let unknown = d.path().join("unknown.toml");
    std::fs::write(&unknown, "n_seed = 1\n").unwrap();
    assert_eq!(gse(&["run", "--plan", unknown.to_str().unwrap(), "--output-dir", out_s]).status.code(), Some(2));
}

#[test]
fn cell_failures_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "");
    let out = d.path().join("out");
    let r = gse(&["run", "--plan", &plan, "--output-dir", out.to_str().unwrap(), "--sigma", "1.7976931348623157e308"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("cell failed"));
    assert!(out.join("failures.json").exists());
}

#[test]
fn generate_writes_a_pool() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("pool.jsonl.gz");
    let r = gse(&["generate", "--size", "12", "--seed", "3", "--out", path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    let pool = gse_core::harness::Pool::read(&path).unwrap();
    assert_eq!(pool.tasks.len(), 12);
    assert!(pool.tasks.iter().all(|t| t.solution.is_some()));
}

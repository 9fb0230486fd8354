use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.size=24",
    "data.n_points=20",
    "surrogate.u_arch.latent_dim=3",
    "surrogate.u_arch.width=8",
    "surrogate.u_arch.depth=2",
    "surrogate.u_arch.hyper_width=8",
    "surrogate.inr.epochs=2",
    "surrogate.inr.select_samples=8",
    "surrogate.ebm_width=8",
    "surrogate.ebm.batch=24",
    "surrogate.ebm.hyper.epochs=3",
    "experiment.runs=2",
    "experiment.pce.n=4",
    "experiment.pce.l=4",
    "experiment.opt.iterations=2",
    "experiment.opt.restarts=1",
    "experiment.design_sgld.steps=20",
    "experiment.infer_sgld.steps=20",
    "experiment.posterior_samples=10",
];

fn couplings(root: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_couplings"));
    cmd.env("COUPLINGS_RUN_ROOT", root).args(args);
    cmd.output().expect("binary runs")
}

fn tiny(root: &Path, args: &[&str]) -> Output {
    let mut all: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    for s in TINY {
        all.push("--set".into());
        all.push(s.to_string());
    }
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    couplings(root, &refs)
}

fn stdout_path(out: &Output) -> PathBuf {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_writes_the_dataset_and_a_manifest() {
    let root = tempfile::tempdir().unwrap();
    let dir = stdout_path(&couplings(root.path(), &["generate", "--problem", "bvp", "--m", "50", "--seed", "7"]));
    assert!(dir.starts_with(root.path()));
    let lines = std::fs::read_to_string(dir.join("dataset.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 50);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("generate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"][0]["path"], "dataset.jsonl");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn pipeline_is_cached_and_evaluate_counts_runs() {
    let root = tempfile::tempdir().unwrap();
    let first = tiny(root.path(), &["pipeline"]);
    let eval_dir = stdout_path(&first);
    assert!(stderr(&first).contains("evaluate: done"));
    let second = tiny(root.path(), &["pipeline"]);
    assert_eq!(stdout_path(&second), eval_dir);
    for stage in ["generate", "train-inr", "encode", "train-ebm", "evaluate"] {
        assert!(stderr(&second).contains(&format!("{stage}: cached")), "{}", stderr(&second));
    }
    let report = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    // Three methods, three metrics each for the boundary value problem.
    assert_eq!(report.lines().count(), 1 + 9);

    let out = tiny(root.path(), &["evaluate", "--method", "adaptive", "--runs", "4"]);
    let dir = stdout_path(&out);
    let runs = std::fs::read_to_string(dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    let u_row = report.lines().find(|l| l.contains("u_rel_l2")).unwrap();
    assert!(u_row.starts_with("bvp,adaptive,u_rel_l2,"));
    assert!(u_row.ends_with(",4,0"), "{u_row}");

    // Single-run stages reproduce the experiment's numbers.
    stdout_path(&tiny(root.path(), &["place", "--method", "qmc", "--run", "1"]));
    stdout_path(&tiny(root.path(), &["infer", "--method", "qmc", "--run", "1"]));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics-qmc-1.json")).unwrap()).unwrap();
    let all_runs = std::fs::read_to_string(eval_dir.join("runs.csv")).unwrap();
    let row = all_runs.lines().find(|l| l.starts_with("1,qmc,")).unwrap();
    let u: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(metrics["u_rel_l2"].as_f64().unwrap(), u);
    assert!(eval_dir.join("placements-qmc-1.csv").exists());
}

#[test]
fn tampering_invalidates_downstream_stages() {
    let root = tempfile::tempdir().unwrap();
    let dir = stdout_path(&tiny(root.path(), &["generate"]));
    stdout_path(&tiny(root.path(), &["train-inr"]));
    let again = tiny(root.path(), &["train-inr"]);
    assert!(stderr(&again).contains("train-inr: cached"));
    let data = dir.join("dataset.jsonl");
    let mut text = std::fs::read_to_string(&data).unwrap();
    let last = text.trim_end().rfind('\n').unwrap();
    text.truncate(last + 1);
    std::fs::write(&data, text).unwrap();
    let rerun = tiny(root.path(), &["train-inr"]);
    assert!(stderr(&rerun).contains("train-inr: done"), "{}", stderr(&rerun));
    // Regenerating restores the dataset, and with it the cached decoders.
    let regen = tiny(root.path(), &["generate"]);
    assert!(stderr(&regen).contains("generate: done"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let root = tempfile::tempdir().unwrap();
    let bad = couplings(root.path(), &["generate", "--set", "data.size=1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("data.size"));
    let unknown = couplings(root.path(), &["generate", "--set", "data.nope=3"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = couplings(root.path(), &["train-ebm", "--set", "data.size=10"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("couplings generate"), "{}", stderr(&missing));
    let no_config = couplings(root.path(), &["generate", "--config", "/nonexistent/c.toml"]);
    assert_eq!(no_config.status.code(), Some(3));
}

#[test]
fn init_writes_a_loadable_config() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("c.toml");
    let p = path.to_str().unwrap();
    assert!(couplings(root.path(), &["init", p, "--problem", "darcy", "--seed", "3"]).status.success());
    let a = stdout_path(&couplings(root.path(), &["where", "--config", p]));
    let b = stdout_path(&couplings(root.path(), &["where", "--problem", "darcy", "--seed", "3"]));
    assert_eq!(a, b);
    assert!(a.file_name().unwrap().to_str().unwrap().starts_with("darcy-"));
    let c = stdout_path(&couplings(root.path(), &["where", "--config", p, "--seed", "4"]));
    assert_ne!(a, c);
}

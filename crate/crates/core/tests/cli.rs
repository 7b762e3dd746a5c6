use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_rscvae");

const SMOKE: &str = r#"
mode = "o"
epochs = 2
eval_every = 1
latent_dim = 8
seed = 4

[model]
widths = [4, 4, 8, 8]

[data]
kind = "synthetic"
n_per_class = 24
classes = 3
target_class = 1
"#;

fn rscvae(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, cfg: &Path, overrides: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()];
    if !overrides.is_empty() {
        args.push("--overrides");
        args.extend_from_slice(overrides);
    }
    rscvae(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn pairwise_auc(samples: &[Value]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for a in samples.iter().filter(|s| s["label"] == 1) {
        for b in samples.iter().filter(|s| s["label"] == 0) {
            let (x, y) = (a["s"].as_f64().unwrap(), b["s"].as_f64().unwrap());
            den += 1.0;
            num += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        }
    }
    num / den
}

#[test]
fn missing_mode_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMOKE.replace("mode = \"o\"", ""));
    let out = train(&dir.path().join("run"), &cfg, &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("mode"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), SMOKE);
    let out = train(&dir.path().join("run"), &cfg, &["lambda_consist=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lambda_consist"));
    let out = train(&dir.path().join("run"), &cfg, &["no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rscvae(&["train", "--config", "/nonexistent.toml", "--output-dir", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_and_numeric_failures_have_their_own_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out = train(&dir.path().join("a"), &cfg, &["data.kind=\"idx\"", "data.dir=\"/nonexistent/mnist\""]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let out = train(&dir.path().join("b"), &cfg, &["lr0=1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let run = dir.path().join("run");
    let out = train(&run, &cfg, &["epochs=0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("checkpoint.final").exists());
    assert!(!run.join("checkpoint.best").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn train_evaluate_export_and_split_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let run = dir.path().join("run");
    let out = train(&run, &cfg, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["config.snapshot", "checkpoint.best", "checkpoint.final", "train_log.jsonl", "score_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "objective", "recon_mean", "enc1_mean", "enc2_mean", "mut_mean", "auroc"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let report = read_json(&run.join("score_report.json"));
    assert!(report["auroc"].is_f64());

    // evaluation is deterministic and its AUROC agrees with a pairwise recount
    let r = run.to_str().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let out = rscvae(&["evaluate", "--output-dir", r, "--report", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let rep = read_json(&a);
    let auc = rep["auroc"].as_f64().unwrap();
    assert!((auc - pairwise_auc(rep["samples"].as_array().unwrap())).abs() < 1e-12);
    let printed = String::from_utf8_lossy(&rscvae(&["evaluate", "--output-dir", r, "--report", a.to_str().unwrap()]).stdout).into_owned();
    assert!(printed.contains(&format!("AUROC {auc:.6}")), "{printed}");

    // α = 0 and α = 1 reduce the score to a single normalized term
    for (alpha, term, key) in [("0", "recon", "e_recon"), ("1", "mut", "e_mut")] {
        let p = dir.path().join(format!("alpha{alpha}.json"));
        let out = rscvae(&["evaluate", "--output-dir", r, "--report", p.to_str().unwrap(), "--overrides", &format!("alpha_score={alpha}")]);
        assert!(out.status.success());
        let rep = read_json(&p);
        let e = rep[key].as_f64().unwrap();
        for s in rep["samples"].as_array().unwrap() {
            assert!((s["s"].as_f64().unwrap() - s[term].as_f64().unwrap() / e).abs() < 1e-12);
        }
    }

    let out = rscvae(&["export-embeddings", "--output-dir", r]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(run.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report["samples"].as_array().unwrap().len());
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 2 + 8);

    let out = rscvae(&["split", "--output-dir", r]);
    assert!(out.status.success());
    let manifest = read_json(&run.join("split_manifest.json"));
    assert_eq!(manifest["train"].as_array().unwrap().len(), 24);
    let test = manifest["test"].as_array().unwrap();
    assert_eq!(test.iter().filter(|s| s["label"] == 0).count(), 24);
    assert_eq!(test.iter().filter(|s| s["label"] == 1).count(), 24);

    // a checkpoint from a different latent size is refused with a clear message
    let out = rscvae(&["evaluate", "--output-dir", r, "--overrides", "latent_dim=16"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("latent dimension"));
}

#[test]
fn reruns_reproduce_every_artifact_but_the_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &cfg, &[]).status.success());
    assert!(train(&b, &cfg, &[]).status.success());
    for f in ["config.snapshot", "checkpoint.best", "checkpoint.final", "train_log.jsonl", "score_report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("run_metadata.json").exists());

    // the snapshot alone reproduces the run
    let c = dir.path().join("c");
    assert!(train(&c, &a.join("config.snapshot"), &[]).status.success());
    assert_eq!(std::fs::read(a.join("checkpoint.final")).unwrap(), std::fs::read(c.join("checkpoint.final")).unwrap());
}

#[test]
fn report_tabulates_runs_by_mode_and_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let mut runs = Vec::new();
    for (name, extra) in [("o", vec!["epochs=1"]), ("d", vec!["epochs=1", "mode=\"d\""]), ("e", vec!["epochs=1", "mode=\"e\"", "anomaly_fraction=0.1"])] {
        let run = dir.path().join(name);
        let out = train(&run, &cfg, &extra);
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push(run.to_str().unwrap().to_string());
    }
    let mut args = vec!["report", "--format", "csv", "--runs"];
    args.extend(runs.iter().map(String::as_str));
    let out = rscvae(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "category,RSC-VAE_o,RSC-VAE_d,RSC-VAE_e");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("Avg.,"));
    assert_eq!(lines[1].split(',').count(), 4);

    let out = rscvae(&["report", "--runs", "/nonexistent/run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/nonexistent/run"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vbae::synthetic::{generate, SyntheticConfig};

fn vbae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vbae")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn synthetic_config(model: &str) -> String {
    format!(
        r#"{{"schema_version": 1, "dataset": {{"kind": "synthetic", "n_users": 120}},
            "model": {model}, "seeds": [3], "output_dir": "out"}}"#
    )
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn config_errors_exit_2_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.json", &synthetic_config(r#"{"epochz": 3}"#));
    let o = vbae(&["run", "--config", &unknown]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    let bad_value = write_config(dir.path(), "b.json", &synthetic_config(r#"{"batch_size": 0}"#));
    let o = vbae(&["train", "--config", &bad_value]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let ok = write_config(dir.path(), "c.json", &synthetic_config("{}"));
    let o = vbae(&["run", "--config", &ok, "--variant", "sideways"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = vbae(&["compare", missing.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(code(&o), 4);

    let config = write_config(dir.path(), "c.json", &synthetic_config(r#"{"epochs": 0}"#));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = vbae(&["run", "--config", &config, "--out", blocker.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_and_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let model = r#"{"epochs": 3, "pretrain_epochs": 0, "batch_size": 20,
        "adam": {"learning_rate": 1e300, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8, "weight_decay": 0}}"#;
    let config = write_config(dir.path(), "c.json", &synthetic_config(model));
    let out = dir.path().join("runs");
    let o = vbae(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let run = only_run_dir(&out);
    assert!(run.join("FAILED").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(run.join("config.json").is_file());
    assert!(!run.join("aggregate.json").exists());
}

#[test]
fn untrained_run_completes_and_records_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &synthetic_config(r#"{"epochs": 0, "pretrain_epochs": 0}"#));
    let out = dir.path().join("runs");
    let o = vbae(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = only_run_dir(&out);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    for f in ["aggregate.json", "dataset.json", "seed-3/split.json", "seed-3/soft/report.json", "seed-3/soft/users.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn ablation_writes_one_report_per_variant_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &synthetic_config(r#"{"epochs": 1, "pretrain_epochs": 0}"#));
    let out = dir.path().join("runs");
    let variants = "soft,hard,stop,pass,concat-baseline";
    let o = vbae(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--variant", variants, "--seeds", "1,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = only_run_dir(&out);
    let mut reports = Vec::new();
    for seed in [1, 2] {
        for v in variants.split(',') {
            let p = run.join(format!("seed-{seed}/{v}/report.json"));
            let r: vbae::eval::EvalReport = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            assert_eq!(r.bandwidth.is_some(), v == "soft" || v == "hard", "{v}");
            reports.push(p.to_str().unwrap().to_string());
        }
    }
    let aggregate: vbae::experiment::Aggregate =
        serde_json::from_str(&std::fs::read_to_string(run.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(aggregate.variants.len(), 5);
    assert!(aggregate.variants.iter().all(|v| v.n_seeds == 2));

    let table = dir.path().join("table");
    let mut args = vec!["compare"];
    args.extend(reports[..5].iter().map(String::as_str));
    args.extend(["--out", table.to_str().unwrap()]);
    let o = vbae(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains('*'));
    let csv = std::fs::read_to_string(table.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn ingest_train_and_eval_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SyntheticConfig { n_users: 100, ..SyntheticConfig::default() }).unwrap();
    data.write_tsv(dir.path()).unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1,
            "dataset": {"kind": "files", "interactions": "interactions.tsv", "user_features": "user_features.tsv"},
            "model": {"epochs": 2, "pretrain_epochs": 1, "batch_size": 25},
            "seeds": [5], "output_dir": "out"}"#,
    );
    let o = vbae(&["ingest", "--config", &config]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["dataset.json", "split-5.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let o = vbae(&["train", "--config", &config, "--variant", "pass"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = dir.path().join("out/seed-5/pass/model");
    assert!(model.join("params.ckpt").is_file());

    let eval_out = dir.path().join("eval");
    let o = vbae(&[
        "eval", "--config", &config, "--model", model.to_str().unwrap(), "--seed", "5", "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(eval_out.join("report.json").is_file());
    let o = vbae(&["eval", "--config", &config, "--model", model.to_str().unwrap(), "--seed", "6"]);
    assert_eq!(code(&o), 2);
}

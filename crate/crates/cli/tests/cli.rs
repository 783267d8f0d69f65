//! Runs the `saeda` binary end to end on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn saeda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saeda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn metric(o: &Output) -> f64 {
    let text = stdout(o);
    let last = text.lines().last().expect("some output");
    last.strip_prefix("metric=").expect("metric line last").parse().expect("float metric")
}

fn small_config(dir: &Path, task: &str, classes: usize) -> PathBuf {
    let cfg = json!({
        "task": task,
        "dataset": {
            "num_classes": classes,
            "samples_per_class_source": 16,
            "samples_per_class_target_labeled": 5,
            "samples_per_class_target_unlabeled": 8,
            "task": task,
        },
        "training": {
            "max_epochs_per_stage": 3,
            "autoencoder_max_epochs": 1,
        },
        "output_dir": "run",
    });
    let path = dir.join(format!("{task}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    saeda(&args)
}

fn log_records(out: &Path) -> Vec<Value> {
    fs::read_to_string(out.join("training_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_bundled_default_writes_three_splits_and_truth() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gen");
    let o = saeda(&["generate", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["source", "target_labeled", "target_unlabeled"] {
        assert!(out.join("data").join(split).join("manifest.json").is_file(), "{split}");
    }
    let truth: Value = serde_json::from_slice(&read(out.join("data/truth.json"))).unwrap();
    assert_eq!(truth["labels"].as_array().unwrap().len(), 1000);
    let table = stdout(&o);
    assert!(table.contains("target_unlabeled") && table.contains("hidden"));
}

#[test]
fn malformed_config_reports_the_key_path() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, "{\n  \"task\": \"classification\",\n  \"output_dir\": \"x\",\n  \"dataset\": {\"noise_sigma_target\": \"high\"}\n}\n").unwrap();
    let o = saeda(&["generate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("dataset.noise_sigma_target"), "{err}");
    assert!(err.contains("line 4"), "{err}");

    fs::write(&path, "{\"task\": \"classification\", \"output_dir\": \"x\", \"dataset\": {}, \"extra\": 1}").unwrap();
    let o = saeda(&["generate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));
}

#[test]
fn too_many_regression_classes_is_a_schedule_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "regression", 6);
    let o = saeda(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("5 slots"), "{}", stderr(&o));
}

#[test]
fn training_is_repeatable_and_reports_capped_stages() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = train(&cfg, &a, &["--seed", "7"]);
    let ob = train(&cfg, &b, &["--seed", "7"]);
    assert_eq!(oa.status.code(), Some(2), "{}", stderr(&oa));
    assert!(stderr(&oa).contains("epoch cap"));
    assert_eq!(metric(&oa), metric(&ob));
    for f in ["report.json", "predictions.json", "confusion.csv", "embedding.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    for stage in ["stage1", "stage2", "stage3"] {
        assert_eq!(
            read(a.join("checkpoints").join(stage).join("params.f32")),
            read(b.join("checkpoints").join(stage).join("params.f32"))
        );
    }
    let meta: Value = serde_json::from_slice(&read(a.join("run_meta.json"))).unwrap();
    assert!(meta["started_unix"].as_u64().unwrap() <= meta["finished_unix"].as_u64().unwrap());
    let acc = metric(&oa);
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn effective_config_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 3);
    let a = tmp.path().join("a");
    train(&cfg, &a, &["--seed", "3", "--beta", "0.5", "--cws-grad", "target-only"]);
    let effective: Value = serde_json::from_slice(&read(a.join("effective_config.json"))).unwrap();
    assert_eq!(effective["ablations"]["beta_override"], json!(0.5));
    assert_eq!(effective["ablations"]["cws_grad"], json!("target-only"));
    assert_eq!(effective["training"]["seed"], json!(3));

    let b = tmp.path().join("b");
    let o = train(&a.join("effective_config.json"), &b, &[]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2), "{}", stderr(&o));
    assert_eq!(read(a.join("predictions.json")), read(b.join("predictions.json")));
}

#[test]
fn zero_beta_logs_target_loss_equal_to_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let out = tmp.path().join("run");
    train(&cfg, &out, &["--beta", "0"]);
    let stage1: Vec<Value> = log_records(&out).into_iter().filter(|r| r["stage"] == 1).collect();
    assert!(!stage1.is_empty());
    for r in stage1 {
        assert_eq!(r["parts"]["target_loss"], r["parts"]["target_reconstruction"]);
    }
}

#[test]
fn resume_skips_stage_one_and_verifies_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    let first = read(out.join("predictions.json"));
    let before = log_records(&out).len();

    let o = train(&cfg, &out, &["--resume", "stage2"]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2), "{}", stderr(&o));
    let records = log_records(&out);
    assert!(records[before..].iter().all(|r| r["stage"] != 1));
    assert_eq!(read(out.join("predictions.json")), first);

    let params = out.join("checkpoints/stage1/params.f32");
    let mut bytes = read(&params);
    bytes[0] ^= 0x01;
    fs::write(&params, bytes).unwrap();
    let o = train(&cfg, &out, &["--resume", "stage2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));

    let o = saeda(&["train", "--resume", "stage9"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn evaluate_is_repeatable_and_checks_the_task() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    let model = out.join("checkpoints/stage3");
    let data = out.join("data");
    let eval = |dir: &Path, truth: &Path| {
        saeda(&[
            "evaluate",
            "--model",
            model.to_str().unwrap(),
            "--dataset",
            data.join("target_unlabeled").to_str().unwrap(),
            "--truth",
            truth.to_str().unwrap(),
            "--source",
            data.join("source").to_str().unwrap(),
            "--target-labeled",
            data.join("target_labeled").to_str().unwrap(),
            "--output",
            dir.to_str().unwrap(),
        ])
    };
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let (o1, o2) = (eval(&e1, &data.join("truth.json")), eval(&e2, &data.join("truth.json")));
    assert!(o1.status.success(), "{}", stderr(&o1));
    assert_eq!(metric(&o1), metric(&o2));
    assert_eq!(read(e1.join("report.json")), read(e2.join("report.json")));
    let report: Value = serde_json::from_slice(&read(e1.join("report.json"))).unwrap();
    assert!(report["matched_discrepancy"].is_number());
    let confusion = report["confusion"].as_array().unwrap();
    let total: u64 = confusion.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 32);

    // A regression truth file for the same split.
    let mut truth: Value = serde_json::from_slice(&read(data.join("truth.json"))).unwrap();
    truth["task"] = json!("regression");
    truth["targets"] = json!(vec![1.0; 32]);
    let wrong = tmp.path().join("wrong_truth.json");
    fs::write(&wrong, truth.to_string()).unwrap();
    let o = eval(&tmp.path().join("e3"), &wrong);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind mismatch"), "{}", stderr(&o));
}

#[test]
fn regression_runs_report_r_squared() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "regression", 5);
    let out = tmp.path().join("run");
    let o = train(&cfg, &out, &[]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&read(out.join("report.json"))).unwrap();
    assert_eq!(report["r_squared"].as_f64().unwrap(), metric(&o));
    assert!(report["mse"].as_f64().unwrap() >= 0.0);
    assert!(!out.join("confusion.csv").exists());
}

#[test]
fn plot_renders_reports_and_embeddings() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 3);
    let out = tmp.path().join("run");
    train(&cfg, &out, &[]);
    for (input, png) in [("confusion.csv", "cm.png"), ("report.json", "cm2.png"), ("embedding.csv", "emb.png")] {
        let target = tmp.path().join(png);
        let o = saeda(&[
            "plot",
            "--input",
            out.join(input).to_str().unwrap(),
            "--output",
            target.to_str().unwrap(),
            "--truth",
            out.join("data/truth.json").to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{input}: {}", stderr(&o));
        assert_eq!(&read(&target)[1..4], b"PNG");
    }

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let unknown = tmp.path().join("unknown.csv");
    fs::write(&unknown, "a,b\n1,2\n").unwrap();
    for bad in [empty, unknown] {
        let o = saeda(&["plot", "--input", bad.to_str().unwrap(), "--output", tmp.path().join("x.png").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
    }
}

#[test]
fn diagnose_reports_alignment_before_and_after() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let out = tmp.path().join("diag");
    let o = saeda(&["diagnose", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(metric(&o) > 0.0);
    let d: Value = serde_json::from_slice(&read(out.join("diagnose.json"))).unwrap();
    for phase in ["before", "after"] {
        assert!(d["labeled"][phase]["matched"].is_number());
        assert!(d["held_out"][phase]["mismatched"].is_number());
    }
}

#[test]
fn saved_datasets_can_drive_a_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "classification", 4);
    let gen = tmp.path().join("gen");
    assert!(saeda(&["generate", "--config", cfg.to_str().unwrap(), "--output", gen.to_str().unwrap()]).status.success());
    let paths_cfg = json!({
        "task": "classification",
        "dataset_paths": {
            "source": "gen/data/source",
            "target_labeled": "gen/data/target_labeled",
            "target_unlabeled": "gen/data/target_unlabeled",
            "truth": "gen/data/truth.json",
        },
        "training": {"max_epochs_per_stage": 3, "autoencoder_max_epochs": 1},
        "output_dir": "from_paths",
    });
    let path = tmp.path().join("paths.json");
    fs::write(&path, paths_cfg.to_string()).unwrap();
    let o = saeda(&["train", "--config", path.to_str().unwrap(), "--output", tmp.path().join("p").to_str().unwrap()]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2), "{}", stderr(&o));
    let direct = train(&cfg, &tmp.path().join("d"), &[]);
    assert_eq!(metric(&o), metric(&direct));
    assert_eq!(read(tmp.path().join("p/predictions.json")), read(tmp.path().join("d/predictions.json")));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_saeda"))
        .args(["generate", "--output", "/nonexistent/never"])
        .env("SAEDA_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("SAEDA_THREADS"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic/pipeline.toml")
}

fn uprise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uprise"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uprise(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stage(name: &str, out: &Path, extra: &[&str]) -> String {
    let cfg = config();
    let mut args = vec![
        name,
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = stage("pipeline", dir.path(), &[]);
    assert!(stdout.contains("validation retrieval accuracy"), "{stdout}");
    assert!(
        stdout.contains("[cluster] review_classification"),
        "{stdout}"
    );
    for f in [
        "report_k0.json",
        "report_k3.json",
        "report_k3.csv",
        "delta_k0_k3.csv",
        "manifest.json",
        "train_log.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn stages_by_hand_match_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stage("pool-build", out, &[]);
    stage("label", out, &["--workers", "4"]);
    let first = std::fs::read(out.join("labels.jsonl")).unwrap();
    std::fs::remove_file(out.join("label_progress.jsonl")).unwrap();
    stage("label", out, &["--workers", "1"]);
    assert!(std::fs::read(out.join("labels.jsonl")).unwrap() == first);

    let train = stage("train", out, &[]);
    assert_eq!(train.matches("epoch ").count(), 4, "{train}");
    stage("index-build", out, &[]);
    let k0 = stage("eval", out, &["--k", "0"]);
    let k3 = stage("eval", out, &["--k", "3"]);
    assert!(k0.contains("k=0") && k3.contains("k=3"));
    let base = out.join("report_k0.json");
    let cand = out.join("report_k3.json");
    let delta = ok(&["compare", base.to_str().unwrap(), cand.to_str().unwrap()]);
    assert!(delta.contains("delta"), "{delta}");

    let whole = tempfile::tempdir().unwrap();
    stage("pipeline", whole.path(), &[]);
    for f in [
        "labels.jsonl",
        "checkpoint.json",
        "index.json",
        "report_k3.json",
    ] {
        assert!(
            std::fs::read(out.join(f)).unwrap() == std::fs::read(whole.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_stage_input_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = uprise(&[
        "train",
        "--config",
        config().to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `pool-build` first"), "{err}");
}

#[test]
fn config_errors_list_every_violation() {
    let out = uprise(&["pool-build", "--k", "3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["seed", "tasks_manifest", "task_examples", "holdout_cluster"] {
        assert!(err.contains(key), "{key} not reported: {err}");
    }
}

#[test]
fn synth_writes_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--train-per-task",
        "8",
        "--test-per-task",
        "4",
    ]);
    let examples = std::fs::read_to_string(dir.path().join("examples.jsonl")).unwrap();
    assert_eq!(examples.lines().count(), 8 * 12);
}

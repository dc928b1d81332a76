use std::path::{Path, PathBuf};

use uprise_core::config::{RawConfig, RunConfig};
use uprise_core::error::Error;
use uprise_core::pipeline::{self, build_lm, inference_pool_path};
use uprise_core::synthetic::{
    generate, CorpusShape, EXAMPLES_FILE, MANIFEST_FILE, MOCK_TABLE_FILE,
};
use uprise_core::taskdata::{PoolMode, PromptPool};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn config(out: &Path, over: RawConfig) -> RunConfig {
    let raw = RawConfig::load(&data_dir().join("pipeline.toml")).unwrap();
    let over = RawConfig {
        out_dir: Some(out.to_path_buf()),
        ..over
    };
    RunConfig::resolve(raw.overlay(over)).unwrap()
}

fn producer(err: Error) -> &'static str {
    match err {
        Error::MissingInput { producer, .. } => producer,
        other => panic!("expected a missing-input error, got {other}"),
    }
}

#[test]
fn bundled_corpus_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    generate(&CorpusShape::default()).write(dir.path()).unwrap();
    for f in [MANIFEST_FILE, EXAMPLES_FILE, MOCK_TABLE_FILE] {
        let fresh = std::fs::read(dir.path().join(f)).unwrap();
        let bundled = std::fs::read(data_dir().join(f)).unwrap();
        assert!(
            fresh == bundled,
            "{f} is stale: regenerate with `uprise synth --out data/synthetic`"
        );
    }
}

#[test]
fn stages_name_their_missing_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), RawConfig::default());
    let lm = build_lm(&cfg).unwrap();
    assert_eq!(
        producer(pipeline::label(&cfg, lm.as_ref()).unwrap_err()),
        "pool-build"
    );
    assert_eq!(producer(pipeline::index_build(&cfg).unwrap_err()), "train");
    assert_eq!(
        producer(pipeline::eval(&cfg, lm.as_ref(), 3).unwrap_err()),
        "train"
    );
    pipeline::pool_build(&cfg).unwrap();
    assert_eq!(producer(pipeline::train_stage(&cfg).unwrap_err()), "label");
    let msg = pipeline::train_stage(&cfg).unwrap_err().to_string();
    assert!(msg.contains("run `label` first"), "{msg}");
    // the zero-shot baseline needs no retriever artifacts
    assert!(pipeline::eval(&cfg, lm.as_ref(), 0).is_ok());
    assert_eq!(
        producer(
            pipeline::compare(&dir.path().join("a.json"), &dir.path().join("b.json")).unwrap_err()
        ),
        "eval"
    );
}

#[test]
fn labeling_resumes_to_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), RawConfig::default());
    let lm = build_lm(&cfg).unwrap();
    pipeline::pool_build(&cfg).unwrap();
    pipeline::label(&cfg, lm.as_ref()).unwrap();
    let full = std::fs::read(&cfg.paths.labels).unwrap();

    // keep a third of the progress log plus a torn line, as after a crash
    let progress = cfg.paths.label_checkpoint();
    let text = std::fs::read_to_string(&progress).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut partial = lines[..lines.len() / 3].join("\n");
    partial.push('\n');
    partial.push_str(&lines[lines.len() / 3][..20]);
    std::fs::write(&progress, partial).unwrap();

    pipeline::label(&cfg, lm.as_ref()).unwrap();
    assert!(std::fs::read(&cfg.paths.labels).unwrap() == full);
    assert_eq!(
        std::fs::read_to_string(&progress).unwrap().lines().count(),
        lines.len()
    );
}

#[test]
fn stale_progress_from_other_settings_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), RawConfig::default());
    let lm = build_lm(&a).unwrap();
    pipeline::pool_build(&a).unwrap();
    pipeline::label(&a, lm.as_ref()).unwrap();
    let b = config(
        dir.path(),
        RawConfig {
            seed: Some(99),
            ..RawConfig::default()
        },
    );
    pipeline::pool_build(&b).unwrap();
    pipeline::label(&b, lm.as_ref()).unwrap();
    let fresh_dir = tempfile::tempdir().unwrap();
    let c = config(
        fresh_dir.path(),
        RawConfig {
            seed: Some(99),
            ..RawConfig::default()
        },
    );
    pipeline::pool_build(&c).unwrap();
    pipeline::label(&c, lm.as_ref()).unwrap();
    assert!(std::fs::read(&b.paths.labels).unwrap() == std::fs::read(&c.paths.labels).unwrap());
}

#[test]
fn target_task_pool_and_comparable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let over = RawConfig {
        pool_mode: Some(PoolMode::TargetTask),
        target_task: Some("podcast_genre".into()),
        ..RawConfig::default()
    };
    let cfg = config(dir.path(), over);
    let lm = build_lm(&cfg).unwrap();
    let summary = pipeline::run_pipeline(&cfg, lm.as_ref()).unwrap();
    let inference = PromptPool::load(&inference_pool_path(&cfg)).unwrap();
    assert!(inference
        .records
        .iter()
        .all(|r| r.source_task == "podcast_genre"));
    let training = PromptPool::load(&cfg.paths.pool).unwrap();
    assert!(training
        .records
        .iter()
        .all(|r| !r.source_task.starts_with("podcast")));
    assert_eq!(summary.retrieval.meta.pool_mode, "target-task");
    assert_eq!(summary.baseline.tasks.len(), summary.retrieval.tasks.len());
    let delta = pipeline::compare(&cfg.paths.report_for_k(0), &cfg.paths.report_for_k(3)).unwrap();
    assert_eq!(delta, summary.delta);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.paths.manifest()).unwrap()).unwrap();
    for artifact in [
        "pool.jsonl",
        "labels.jsonl",
        "checkpoint.json",
        "index.json",
        "report_k0.json",
        "report_k3.json",
    ] {
        assert_eq!(
            manifest["artifacts"][artifact].as_str().map(str::len),
            Some(64),
            "{artifact}"
        );
    }
    assert_eq!(manifest["config_hash"], cfg.hash());
}

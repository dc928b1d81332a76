//! Pipeline stages over on-disk artifacts: pool-build, label, train,
//! index-build, eval and compare. Every stage reads what the previous one
//! wrote and records fingerprints in the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{LmKind, RunConfig};
use crate::encoder::build_vocab;
use crate::error::{Error, Result};
use crate::evalharness::{
    compare_runs, evaluate_tasks, select_tasks, DeltaTable, EvalConfig, EvalReport, Retriever,
    RunMeta,
};
use crate::index::{build_index, RetrievalIndex};
use crate::io::{self, derive_rng};
use crate::labeling::{
    label_resumable, split_train_valid, LabelCheckpoint, LabelOutcome, LabeledInstance,
};
use crate::lmclient::{LanguageModel, MockTable, RemoteConfig, RemoteLm, TopicLm};
use crate::synthetic;
use crate::taskdata::{
    build_pool, pool_tasks, PoolMode, PoolSpec, PromptPool, Split, TaskExample, TaskSet,
};
use crate::training::{train, write_log_csv, Checkpoint, PreparedData, TrainOutcome};

const LABEL_CHUNK: usize = 64;

/// Builds a rayon pool with exactly `workers` threads and runs `f` on it.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("building worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn build_lm(cfg: &RunConfig) -> Result<Box<dyn LanguageModel>> {
    match cfg.lm.kind {
        LmKind::Mock => {
            let table: MockTable = match &cfg.lm.mock_table {
                Some(path) => io::read_json(path)?,
                None => synthetic::mock_table(cfg.seed),
            };
            Ok(Box::new(TopicLm::new(table)?))
        }
        LmKind::Remote => {
            let url = cfg
                .lm
                .url
                .clone()
                .ok_or_else(|| Error::config("lm = remote needs lm_url"))?;
            Ok(Box::new(RemoteLm::new(RemoteConfig::new(url))?))
        }
    }
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            path: path.to_path_buf(),
            producer,
        })
    }
}

pub fn load_tasks(cfg: &RunConfig) -> Result<TaskSet> {
    for p in [&cfg.paths.tasks_manifest, &cfg.paths.task_examples] {
        if !p.exists() {
            return Err(Error::Data(format!(
                "task data file {} does not exist",
                p.display()
            )));
        }
    }
    let set = TaskSet::load(
        &cfg.paths.tasks_manifest,
        &cfg.paths.task_examples,
        cfg.seed,
    )?;
    Ok(set.sample_training(cfg.sample_cap, cfg.seed))
}

/// The pool used for labeling and training: always the remaining clusters.
fn training_pool_spec(cfg: &RunConfig) -> PoolSpec {
    PoolSpec {
        holdout_cluster: cfg.pool.holdout_cluster.clone(),
        mode: PoolMode::RemainingClusters,
        target_task: None,
    }
}

pub fn inference_pool_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("inference_pool.jsonl")
}

// ---- manifest ----

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub lm: String,
    pub config: Option<RunConfig>,
    /// Artifact name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

fn record_artifacts(
    cfg: &RunConfig,
    lm: Option<&dyn LanguageModel>,
    files: &[&Path],
) -> Result<()> {
    let path = cfg.paths.manifest();
    let mut m: Manifest = if path.exists() {
        io::read_json(&path)?
    } else {
        Manifest::default()
    };
    if m.config_hash != cfg.hash() {
        m = Manifest::default();
    }
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.config = Some(cfg.clone());
    if let Some(lm) = lm {
        m.lm = lm.identity();
    }
    for f in files {
        let name = f.file_name().map_or_else(
            || f.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        m.artifacts.insert(name, io::file_fingerprint(f)?);
    }
    io::write_json(&path, &m)
}

// ---- stages ----

#[derive(Debug, Clone)]
pub struct Pools {
    pub training: PromptPool,
    pub inference: PromptPool,
}

pub fn pool_build(cfg: &RunConfig) -> Result<Pools> {
    let tasks = load_tasks(cfg)?;
    let training = build_pool(&tasks, &training_pool_spec(cfg))?;
    let inference = build_pool(&tasks, &cfg.pool)?;
    training.save(&cfg.paths.pool)?;
    let inf_path = inference_pool_path(cfg);
    inference.save(&inf_path)?;
    log::info!(
        "pool-build: {} training prompts, {} inference prompts ({})",
        training.len(),
        inference.len(),
        cfg.pool.mode
    );
    record_artifacts(cfg, None, &[&cfg.paths.pool, &inf_path])?;
    Ok(Pools {
        training,
        inference,
    })
}

fn load_training_pool(cfg: &RunConfig) -> Result<PromptPool> {
    require(&cfg.paths.pool, "pool-build")?;
    PromptPool::load(&cfg.paths.pool)
}

fn load_inference_pool(cfg: &RunConfig) -> Result<PromptPool> {
    let path = inference_pool_path(cfg);
    require(&path, "pool-build")?;
    PromptPool::load(&path)
}

#[derive(Debug, Clone)]
pub struct LabelSummary {
    pub labeled: usize,
    pub filtered: usize,
    pub train: Vec<LabeledInstance>,
    pub valid: Vec<LabeledInstance>,
}

/// Progress from a run with other settings or another pool is discarded.
fn label_progress(cfg: &RunConfig, pool_fp: &str) -> Result<LabelCheckpoint> {
    let progress = cfg.paths.label_checkpoint();
    let key_path = progress.with_extension("key");
    let key = format!("{}:{}", cfg.hash(), pool_fp);
    let stale = std::fs::read_to_string(&key_path).map_or(true, |k| k.trim() != key);
    if stale {
        if progress.exists() {
            std::fs::remove_file(&progress)
                .map_err(|e| Error::io(format!("removing {}", progress.display()), e))?;
        }
        io::write_text(&key_path, &format!("{key}\n"))?;
    }
    Ok(LabelCheckpoint::new(progress))
}

pub fn label(cfg: &RunConfig, lm: &dyn LanguageModel) -> Result<LabelSummary> {
    let pool = load_training_pool(cfg)?;
    let tasks = load_tasks(cfg)?;
    let examples: Vec<&TaskExample> = pool_tasks(&tasks, &training_pool_spec(cfg))?
        .into_iter()
        .flat_map(|t| t.split(Split::Train))
        .collect();
    let checkpoint = label_progress(cfg, &io::file_fingerprint(&cfg.paths.pool)?)?;
    let outcomes = label_resumable(
        lm,
        &pool,
        &examples,
        &cfg.labeling,
        &cfg.scoring,
        cfg.seed,
        &checkpoint,
        LABEL_CHUNK,
    )?;
    let instances: Vec<LabeledInstance> = outcomes
        .iter()
        .filter_map(LabelOutcome::instance)
        .cloned()
        .collect();
    let filtered = outcomes.len() - instances.len();
    log::info!("label: {} labeled, {filtered} filtered", instances.len());
    for inst in &instances {
        inst.validate(&pool)?;
    }
    let mut rng = derive_rng(cfg.seed, &["split"]);
    let (train, valid) = split_train_valid(&instances, cfg.train_fraction, &mut rng)?;
    io::write_jsonl(&cfg.paths.labels, &instances)?;
    io::write_jsonl(&cfg.paths.train_split(), &train)?;
    io::write_jsonl(&cfg.paths.valid_split(), &valid)?;
    record_artifacts(
        cfg,
        Some(lm),
        &[
            &cfg.paths.labels,
            &cfg.paths.train_split(),
            &cfg.paths.valid_split(),
        ],
    )?;
    Ok(LabelSummary {
        labeled: instances.len(),
        filtered,
        train,
        valid,
    })
}

pub fn train_stage(cfg: &RunConfig) -> Result<TrainOutcome> {
    let pool = load_training_pool(cfg)?;
    require(&cfg.paths.train_split(), "label")?;
    require(&cfg.paths.valid_split(), "label")?;
    let train_set: Vec<LabeledInstance> = io::read_jsonl(&cfg.paths.train_split())?;
    let valid_set: Vec<LabeledInstance> = io::read_jsonl(&cfg.paths.valid_split())?;
    let corpus = pool
        .records
        .iter()
        .map(|r| r.text.as_str())
        .chain(train_set.iter().map(|i| i.input_text.as_str()));
    let vocab = build_vocab(corpus, cfg.train.max_vocab)?;
    let data = PreparedData::new(&vocab, &pool, &train_set, &valid_set, cfg.train.max_seq_len)?;
    let outcome = train(&vocab, &data, &cfg.train)?;
    outcome.best.save(&cfg.paths.checkpoint)?;
    write_log_csv(&cfg.paths.train_log(), &outcome.log)?;
    log::info!(
        "train: best epoch {} with validation accuracy {:.4}",
        outcome.best.epoch,
        outcome.best.valid_accuracy
    );
    record_artifacts(cfg, None, &[&cfg.paths.checkpoint, &cfg.paths.train_log()])?;
    Ok(outcome)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    require(&cfg.paths.checkpoint, "train")?;
    Checkpoint::load(&cfg.paths.checkpoint)
}

pub fn index_build(cfg: &RunConfig) -> Result<RetrievalIndex> {
    let ckpt = load_checkpoint(cfg)?;
    let pool = load_inference_pool(cfg)?;
    let index = build_index(&ckpt.params, &ckpt.vocab()?, &pool, cfg.train.max_seq_len)?;
    index.save(&cfg.paths.index)?;
    log::info!(
        "index-build: {} prompts of dimension {}",
        index.len(),
        index.dim
    );
    record_artifacts(cfg, None, &[&cfg.paths.index])?;
    Ok(index)
}

/// Evaluates the hold-out cluster with `k` retrieved prompts and writes
/// `report_k{k}.json` / `.csv`.
pub fn eval(cfg: &RunConfig, lm: &dyn LanguageModel, k: usize) -> Result<EvalReport> {
    let tasks = load_tasks(cfg)?;
    let targets = select_tasks(&tasks, Some(&cfg.pool.holdout_cluster));
    if targets.is_empty() {
        return Err(Error::config(format!(
            "hold-out cluster `{}` has no tasks",
            cfg.pool.holdout_cluster
        )));
    }
    let eval_cfg = EvalConfig {
        k,
        max_new_tokens: cfg.scoring.max_new_tokens,
        ..EvalConfig::default()
    };
    let mut meta = RunMeta {
        seed: cfg.seed,
        lm: lm.identity(),
        params_fingerprint: None,
        k,
        pool_mode: cfg.pool.mode.to_string(),
    };
    let report = if k == 0 {
        evaluate_tasks(lm, None, &targets, &eval_cfg, meta)?
    } else {
        let ckpt = load_checkpoint(cfg)?;
        let vocab = ckpt.vocab()?;
        require(&cfg.paths.index, "index-build")?;
        let fp = ckpt.params.fingerprint();
        let index = RetrievalIndex::load(&cfg.paths.index, &fp)?;
        let pool = load_inference_pool(cfg)?;
        if index.len() != pool.len() {
            return Err(Error::Data(format!(
                "index holds {} prompts but the inference pool has {}: rerun `index-build`",
                index.len(),
                pool.len()
            )));
        }
        meta.params_fingerprint = Some(fp);
        let retriever = Retriever {
            params: &ckpt.params,
            vocab: &vocab,
            index: &index,
            pool: &pool,
            max_len: cfg.train.max_seq_len,
        };
        evaluate_tasks(lm, Some(&retriever), &targets, &eval_cfg, meta)?
    };
    let json = cfg.paths.report_for_k(k);
    let csv = json.with_extension("csv");
    report.save_json(&json)?;
    report.write_csv(&csv)?;
    record_artifacts(cfg, Some(lm), &[&json, &csv])?;
    Ok(report)
}

pub fn compare(baseline: &Path, candidate: &Path) -> Result<DeltaTable> {
    require(baseline, "eval")?;
    require(candidate, "eval")?;
    compare_runs(
        &EvalReport::load_json(baseline)?,
        &EvalReport::load_json(candidate)?,
    )
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub labeled: usize,
    pub filtered: usize,
    pub initial_accuracy: f64,
    pub best_epoch: usize,
    pub valid_accuracy: f64,
    pub baseline: EvalReport,
    pub retrieval: EvalReport,
    pub delta: DeltaTable,
}

/// All stages chained, then a zero-shot baseline and a comparison against it.
pub fn run_pipeline(cfg: &RunConfig, lm: &dyn LanguageModel) -> Result<PipelineSummary> {
    pool_build(cfg)?;
    let labels = label(cfg, lm)?;
    let trained = train_stage(cfg)?;
    index_build(cfg)?;
    let baseline = eval(cfg, lm, 0)?;
    let retrieval = eval(cfg, lm, cfg.k)?;
    let delta = compare_runs(&baseline, &retrieval)?;
    let delta_path = cfg.paths.out_dir.join(format!("delta_k0_k{}.csv", cfg.k));
    delta.write_csv(&delta_path)?;
    record_artifacts(cfg, Some(lm), &[&delta_path])?;
    Ok(PipelineSummary {
        labeled: labels.labeled,
        filtered: labels.filtered,
        initial_accuracy: trained.initial_accuracy,
        best_epoch: trained.best.epoch,
        valid_accuracy: trained.best.valid_accuracy,
        baseline,
        retrieval,
        delta,
    })
}

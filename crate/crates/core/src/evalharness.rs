//! Zero-shot evaluation with and without retrieved prompts, and
//! per-task / per-cluster aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::index::{assemble_input, retrieve_topk, RetrievalIndex};
use crate::io;
use crate::lmclient::{CompletionRequest, LanguageModel, LmError};
use crate::scoring::{exact_match, token_f1, DEFAULT_MAX_NEW_TOKENS};
use crate::taskdata::{MetricName, PromptPool, QuestionType, Task, TaskExample, TaskSet};

/// Everything needed to retrieve prompts for an input.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub params: &'a EncoderParams,
    pub vocab: &'a Vocab,
    pub index: &'a RetrievalIndex,
    pub pool: &'a PromptPool,
    pub max_len: usize,
}

impl Retriever<'_> {
    /// Top-`k` pool records for an input, best first.
    pub fn retrieve(&self, input_text: &str, k: usize) -> Result<Vec<usize>> {
        let query = self
            .params
            .encode_input(&tokenize(self.vocab, input_text, self.max_len))?;
        retrieve_topk(self.index, &query, k)
    }

    pub fn context_for(&self, input_text: &str, k: usize) -> Result<String> {
        let ids = self.retrieve(input_text, k)?;
        let texts = ids
            .iter()
            .map(|&id| {
                self.pool.get(id).map(|r| r.text.as_str()).ok_or_else(|| {
                    Error::Data(format!("index returned prompt {id} missing from the pool"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble_input(&texts, input_text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub max_new_tokens: usize,
    /// Largest tolerated fraction of examples whose LM call failed.
    pub max_failure_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: crate::index::DEFAULT_TOP_K,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            max_failure_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScores {
    pub context: String,
    pub scores: BTreeMap<MetricName, f64>,
}

/// Builds the context for `example` (retrieved prompts then input, or the
/// input alone when `k == 0`) and scores the LM's answer.
pub fn evaluate_example(
    lm: &dyn LanguageModel,
    retriever: Option<&Retriever<'_>>,
    example: &TaskExample,
    k: usize,
    max_new_tokens: usize,
) -> Result<ExampleScores> {
    let context = match (k, retriever) {
        (0, _) => example.input_text.clone(),
        (_, Some(r)) => r.context_for(&example.input_text, k)?,
        (_, None) => {
            return Err(Error::config(format!(
                "k = {k} needs a trained retriever and index"
            )))
        }
    };
    let mut scores = BTreeMap::new();
    match example.question_type {
        QuestionType::TextCompletion => {
            let prediction =
                lm.greedy_complete(&CompletionRequest::new(context.clone(), max_new_tokens))?;
            scores.insert(MetricName::F1, token_f1(&prediction, &example.completion));
            scores.insert(
                MetricName::Em,
                exact_match(&prediction, &example.completion),
            );
        }
        QuestionType::MultipleChoice => {
            let gold = example.gold_option_index.ok_or_else(|| {
                Error::Data(format!(
                    "example {} lacks a gold option",
                    example.example_id
                ))
            })?;
            let predicted = lm.predict_choice(&context, &example.options)?;
            scores.insert(
                MetricName::Accuracy,
                if predicted == gold { 1.0 } else { 0.0 },
            );
        }
    }
    Ok(ExampleScores { context, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub cluster_id: String,
    /// The task's designated metric.
    pub metric_name: MetricName,
    /// Every metric reported for the task: F1 and EM for text completion, accuracy for multiple choice.
    pub scores: BTreeMap<MetricName, f64>,
    pub example_count: usize,
    pub failed: usize,
    pub k: usize,
    pub pool_mode: String,
}

impl TaskResult {
    pub fn primary(&self) -> f64 {
        self.scores
            .get(&self.metric_name)
            .copied()
            .unwrap_or_else(|| {
                // a task whose designated metric was not produced falls back to the mean of what was
                self.scores.values().sum::<f64>() / self.scores.len() as f64
            })
    }
}

pub fn evaluate_task(
    lm: &dyn LanguageModel,
    retriever: Option<&Retriever<'_>>,
    task: &Task,
    cfg: &EvalConfig,
    pool_mode: &str,
) -> Result<TaskResult> {
    let examples = task.eval_examples();
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "task {} has no test or validation examples",
            task.spec.task_id
        )));
    }
    let max_new = task.spec.max_new_tokens.unwrap_or(cfg.max_new_tokens);
    let outcomes: Vec<Result<ExampleScores>> = examples
        .par_iter()
        .map(|e| evaluate_example(lm, retriever, e, cfg.k, max_new))
        .collect();

    let mut sums: BTreeMap<MetricName, f64> = BTreeMap::new();
    let mut ok = 0usize;
    let mut failed = 0usize;
    for (example, outcome) in examples.iter().zip(outcomes) {
        match outcome {
            Ok(s) => {
                ok += 1;
                for (m, v) in s.scores {
                    *sums.entry(m).or_default() += v;
                }
            }
            Err(Error::Lm(e @ (LmError::Retryable { .. } | LmError::Protocol(_)))) => {
                log::warn!(
                    "task {} example {}: {e}",
                    task.spec.task_id,
                    example.example_id
                );
                failed += 1;
            }
            Err(other) => return Err(other),
        }
    }
    let rate = failed as f64 / examples.len() as f64;
    if rate > cfg.max_failure_rate || ok == 0 {
        return Err(Error::Internal(format!(
            "task {}: {failed} of {} examples failed, above the {:.1}% bound",
            task.spec.task_id,
            examples.len(),
            cfg.max_failure_rate * 100.0
        )));
    }
    let scores = sums.into_iter().map(|(m, s)| (m, s / ok as f64)).collect();
    Ok(TaskResult {
        task_id: task.spec.task_id.clone(),
        cluster_id: task.spec.cluster_id.clone(),
        metric_name: task.spec.metric_name,
        scores,
        example_count: examples.len(),
        failed,
        k: cfg.k,
        pool_mode: pool_mode.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub cluster_id: String,
    /// Unweighted mean of the tasks' designated-metric scores.
    pub mean_primary: f64,
    /// Unweighted mean over every (task, metric) row of the cluster.
    pub mean_all_metrics: f64,
    pub task_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub lm: String,
    pub params_fingerprint: Option<String>,
    pub k: usize,
    pub pool_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub tasks: Vec<TaskResult>,
    pub clusters: Vec<ClusterResult>,
}

pub fn aggregate_clusters(tasks: &[TaskResult]) -> Vec<ClusterResult> {
    let mut by_cluster: BTreeMap<&str, Vec<&TaskResult>> = BTreeMap::new();
    for t in tasks {
        by_cluster.entry(&t.cluster_id).or_default().push(t);
    }
    by_cluster
        .into_iter()
        .map(|(c, ts)| {
            let mean_primary = ts.iter().map(|t| t.primary()).sum::<f64>() / ts.len() as f64;
            let rows: Vec<f64> = ts.iter().flat_map(|t| t.scores.values().copied()).collect();
            let mean_all_metrics = rows.iter().sum::<f64>() / rows.len() as f64;
            ClusterResult {
                cluster_id: c.to_string(),
                mean_primary,
                mean_all_metrics,
                task_count: ts.len(),
            }
        })
        .collect()
}

/// Evaluates the given tasks (in task-id order) and aggregates per cluster.
pub fn evaluate_tasks(
    lm: &dyn LanguageModel,
    retriever: Option<&Retriever<'_>>,
    tasks: &[&Task],
    cfg: &EvalConfig,
    meta: RunMeta,
) -> Result<EvalReport> {
    let mut sorted: Vec<&Task> = tasks.to_vec();
    sorted.sort_by(|a, b| a.spec.task_id.cmp(&b.spec.task_id));
    let results = sorted
        .iter()
        .map(|t| evaluate_task(lm, retriever, t, cfg, &meta.pool_mode))
        .collect::<Result<Vec<_>>>()?;
    let clusters = aggregate_clusters(&results);
    Ok(EvalReport {
        meta,
        tasks: results,
        clusters,
    })
}

/// Tasks of one cluster, or every task when `cluster` is `None`.
pub fn select_tasks<'a>(taskset: &'a TaskSet, cluster: Option<&str>) -> Vec<&'a Task> {
    taskset
        .tasks
        .values()
        .filter(|t| cluster.is_none_or(|c| t.spec.cluster_id == c))
        .collect()
}

impl EvalReport {
    pub fn cluster(&self, id: &str) -> Option<&ClusterResult> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "scope",
            "id",
            "cluster",
            "metric",
            "score",
            "examples",
            "k",
            "pool_mode",
        ])?;
        let k = self.meta.k.to_string();
        for t in &self.tasks {
            for (m, s) in &t.scores {
                w.write_record([
                    "task",
                    &t.task_id,
                    &t.cluster_id,
                    &m.to_string(),
                    &s.to_string(),
                    &t.example_count.to_string(),
                    &k,
                    &t.pool_mode,
                ])?;
            }
        }
        for c in &self.clusters {
            for (metric, value) in [
                ("mean_primary", c.mean_primary),
                ("mean_all_metrics", c.mean_all_metrics),
            ] {
                w.write_record([
                    "cluster",
                    &c.cluster_id,
                    &c.cluster_id,
                    metric,
                    &value.to_string(),
                    "",
                    &k,
                    &self.meta.pool_mode,
                ])?;
            }
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Plain-text table with scores ×100.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "LM: {}  k={}  pool={}  seed={}",
            self.meta.lm, self.meta.k, self.meta.pool_mode, self.meta.seed
        );
        let _ = writeln!(
            out,
            "{:<28} {:<16} {:<9} {:>7} {:>6}",
            "task", "cluster", "metric", "score", "n"
        );
        for t in &self.tasks {
            for (m, s) in &t.scores {
                let _ = writeln!(
                    out,
                    "{:<28} {:<16} {:<9} {:>7.1} {:>6}",
                    t.task_id,
                    t.cluster_id,
                    m.to_string(),
                    s * 100.0,
                    t.example_count
                );
            }
        }
        for c in &self.clusters {
            let _ = writeln!(
                out,
                "{:<28} {:<16} {:<9} {:>7.1} {:>6}",
                "average",
                c.cluster_id,
                "all",
                c.mean_all_metrics * 100.0,
                c.task_count
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task_id: String,
    pub metric: MetricName,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDelta {
    pub cluster_id: String,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub tasks: Vec<TaskDelta>,
    pub clusters: Vec<ClusterDelta>,
}

/// Signed per-task and per-cluster differences, `candidate - baseline`.
pub fn compare_runs(baseline: &EvalReport, candidate: &EvalReport) -> Result<DeltaTable> {
    let keys = |r: &EvalReport| -> Vec<(String, Vec<MetricName>)> {
        let mut k: Vec<_> = r
            .tasks
            .iter()
            .map(|t| (t.task_id.clone(), t.scores.keys().copied().collect()))
            .collect();
        k.sort();
        k
    };
    if keys(baseline) != keys(candidate) {
        return Err(Error::Data(
            "reports cover different tasks or metrics".into(),
        ));
    }
    let cand: BTreeMap<&str, &TaskResult> = candidate
        .tasks
        .iter()
        .map(|t| (t.task_id.as_str(), t))
        .collect();
    let mut tasks = Vec::new();
    for b in &baseline.tasks {
        let c = cand[b.task_id.as_str()];
        for (m, &bv) in &b.scores {
            let cv = c.scores[m];
            tasks.push(TaskDelta {
                task_id: b.task_id.clone(),
                metric: *m,
                baseline: bv,
                candidate: cv,
                delta: cv - bv,
            });
        }
    }
    tasks.sort_by(|a, b| (&a.task_id, a.metric).cmp(&(&b.task_id, b.metric)));
    let clusters = baseline
        .clusters
        .iter()
        .map(|bc| {
            let cc = candidate.cluster(&bc.cluster_id).ok_or_else(|| {
                Error::Data(format!(
                    "cluster {} missing from candidate report",
                    bc.cluster_id
                ))
            })?;
            Ok(ClusterDelta {
                cluster_id: bc.cluster_id.clone(),
                baseline: bc.mean_all_metrics,
                candidate: cc.mean_all_metrics,
                delta: cc.mean_all_metrics - bc.mean_all_metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaTable { tasks, clusters })
}

impl DeltaTable {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:<9} {:>8} {:>8} {:>8}",
            "task", "metric", "base", "cand", "delta"
        );
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<28} {:<9} {:>8.1} {:>8.1} {:>+8.1}",
                t.task_id,
                t.metric.to_string(),
                t.baseline * 100.0,
                t.candidate * 100.0,
                t.delta * 100.0
            );
        }
        for c in &self.clusters {
            let _ = writeln!(
                out,
                "{:<28} {:<9} {:>8.1} {:>8.1} {:>+8.1}",
                format!("[cluster] {}", c.cluster_id),
                "all",
                c.baseline * 100.0,
                c.candidate * 100.0,
                c.delta * 100.0
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scope", "id", "metric", "baseline", "candidate", "delta"])?;
        for t in &self.tasks {
            w.write_record([
                "task",
                &t.task_id,
                &t.metric.to_string(),
                &t.baseline.to_string(),
                &t.candidate.to_string(),
                &t.delta.to_string(),
            ])?;
        }
        for c in &self.clusters {
            w.write_record([
                "cluster",
                &c.cluster_id,
                "all",
                &c.baseline.to_string(),
                &c.candidate.to_string(),
                &c.delta.to_string(),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

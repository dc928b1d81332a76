//! Task loading, template rendering, input sanitization, class-balanced
//! sampling and prompt pool construction.
//!
//! Tasks arrive as two files: a manifest (JSON array of [`TaskSpec`]) and a
//! JSONL file of [`RawExample`] records. Rendering turns each raw record into
//! a [`TaskExample`] through one of the task's templates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, derive_rng, Rng};

/// Marker line that starts an options block in rendered inputs.
pub const OPTIONS_MARKER: &str = "OPTIONS:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    TextCompletion,
    MultipleChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    F1,
    Em,
    Accuracy,
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::F1 => "f1",
            MetricName::Em => "em",
            MetricName::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub pattern: String,
    pub completion_pattern: String,
}

/// One entry of the tasks manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub cluster_id: String,
    pub question_type: QuestionType,
    pub metric_name: MetricName,
    pub templates: Vec<Template>,
    /// Generation budget for text-completion scoring; falls back to the run default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
}

/// An example as stored in the task file, before template rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub example_id: String,
    pub task_id: String,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_option_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub example_id: String,
    pub task_id: String,
    pub cluster_id: String,
    pub input_text: String,
    pub completion: String,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_option_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default)]
    pub split: Split,
}

impl TaskExample {
    /// Checks the per-example invariants.
    pub fn validate(&self) -> Result<()> {
        if self.input_text.contains('\n') {
            return Err(Error::Data(format!(
                "example {}/{}: input contains a newline",
                self.task_id, self.example_id
            )));
        }
        if self.question_type == QuestionType::MultipleChoice {
            let m = self.options.len();
            let gold = self.gold_option_index.ok_or_else(|| {
                Error::Data(format!(
                    "example {}/{}: multiple-choice example without gold_option_index",
                    self.task_id, self.example_id
                ))
            })?;
            if m < 2 || gold >= m {
                return Err(Error::Data(format!(
                    "example {}/{}: needs at least 2 options and a gold index in range (got {m} options, gold {gold})",
                    self.task_id, self.example_id
                )));
            }
            if self.completion != self.options[gold] {
                return Err(Error::Data(format!(
                    "example {}/{}: completion {:?} differs from gold option {:?}",
                    self.task_id, self.example_id, self.completion, self.options[gold]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub examples: Vec<TaskExample>,
}

impl Task {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaskExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Examples used for evaluation: the test split when present, else validation.
    pub fn eval_examples(&self) -> Vec<&TaskExample> {
        let test: Vec<_> = self.split(Split::Test).collect();
        if !test.is_empty() {
            return test;
        }
        self.split(Split::Validation).collect()
    }
}

/// All tasks keyed by task id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: BTreeMap<String, Task>,
}

impl TaskSet {
    /// Renders raw examples through their task templates. Template choice per
    /// example is drawn from a stream keyed by (seed, task, example).
    pub fn from_raw(specs: Vec<TaskSpec>, raw: Vec<RawExample>, seed: u64) -> Result<Self> {
        let mut tasks: BTreeMap<String, Task> = BTreeMap::new();
        for spec in specs {
            if spec.templates.is_empty() {
                return Err(Error::Data(format!(
                    "task {} has no templates",
                    spec.task_id
                )));
            }
            if tasks.contains_key(&spec.task_id) {
                return Err(Error::Data(format!("duplicate task {}", spec.task_id)));
            }
            tasks.insert(
                spec.task_id.clone(),
                Task {
                    spec,
                    examples: Vec::new(),
                },
            );
        }
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for r in raw {
            let task = tasks.get_mut(&r.task_id).ok_or_else(|| {
                Error::Data(format!(
                    "example {} names unknown task {}",
                    r.example_id, r.task_id
                ))
            })?;
            if !seen.insert((r.task_id.clone(), r.example_id.clone())) {
                return Err(Error::Data(format!(
                    "duplicate example id {} in task {}",
                    r.example_id, r.task_id
                )));
            }
            let mut rng = derive_rng(seed, &["render", &r.task_id, &r.example_id]);
            let template = choose_template(&task.spec.templates, &mut rng);
            let (input_text, completion) = render_example(&r.fields, template)?;
            let example = TaskExample {
                example_id: r.example_id,
                task_id: r.task_id,
                cluster_id: task.spec.cluster_id.clone(),
                input_text,
                completion,
                question_type: task.spec.question_type,
                options: r.options,
                gold_option_index: r.gold_option_index,
                class_label: r.class_label,
                split: r.split,
            };
            example.validate()?;
            task.examples.push(example);
        }
        for task in tasks.values_mut() {
            task.examples
                .sort_by(|a, b| a.example_id.cmp(&b.example_id));
        }
        Ok(TaskSet { tasks })
    }

    pub fn load(manifest: &Path, examples: &Path, seed: u64) -> Result<Self> {
        let specs: Vec<TaskSpec> = io::read_json(manifest)?;
        let raw: Vec<RawExample> = io::read_jsonl(examples)?;
        Self::from_raw(specs, raw, seed)
    }

    pub fn clusters(&self) -> BTreeSet<&str> {
        self.tasks
            .values()
            .map(|t| t.spec.cluster_id.as_str())
            .collect()
    }

    pub fn tasks_in_cluster<'a>(&'a self, cluster: &'a str) -> impl Iterator<Item = &'a Task> + 'a {
        self.tasks
            .values()
            .filter(move |t| t.spec.cluster_id == cluster)
    }

    /// Caps every task's training split with [`sample_dataset`]; other splits are kept whole.
    pub fn sample_training(&self, cap: usize, seed: u64) -> TaskSet {
        let tasks = self
            .tasks
            .iter()
            .map(|(id, task)| {
                let train: Vec<TaskExample> = task.split(Split::Train).cloned().collect();
                let mut rng = derive_rng(seed, &["sample", id]);
                let mut kept = sample_dataset(&train, cap, &mut rng);
                kept.extend(
                    task.examples
                        .iter()
                        .filter(|e| e.split != Split::Train)
                        .cloned(),
                );
                kept.sort_by(|a, b| a.example_id.cmp(&b.example_id));
                (
                    id.clone(),
                    Task {
                        spec: task.spec.clone(),
                        examples: kept,
                    },
                )
            })
            .collect();
        TaskSet { tasks }
    }
}

/// Normalizes a rendered task input: drops an options block introduced by a
/// line reading `OPTIONS:`, turns newlines into spaces and collapses whitespace.
pub fn sanitize_input(raw: &str) -> String {
    let mut kept = String::with_capacity(raw.len());
    for line in raw.split(['\n', '\r']) {
        if line.trim() == OPTIONS_MARKER {
            break;
        }
        kept.push_str(line);
        kept.push(' ');
    }
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn choose_template<'a>(templates: &'a [Template], rng: &mut Rng) -> &'a Template {
    templates
        .choose(rng)
        .expect("task has at least one template")
}

/// Fills `{field}` placeholders. Braces that do not enclose a field name are literal.
pub fn fill_placeholders(
    pattern: &str,
    fields: &BTreeMap<String, String>,
    template_id: &str,
) -> Result<String> {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_field_name(&after[..close]) => {
                let name = &after[..close];
                let value = fields.get(name).ok_or_else(|| {
                    Error::Data(format!(
                        "template {template_id} references missing field `{name}`"
                    ))
                })?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_field_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Returns the sanitized input and the filled completion.
pub fn render_example(
    fields: &BTreeMap<String, String>,
    template: &Template,
) -> Result<(String, String)> {
    let input = fill_placeholders(&template.pattern, fields, &template.id)?;
    let completion = fill_placeholders(&template.completion_pattern, fields, &template.id)?;
    Ok((sanitize_input(&input), completion.trim().to_string()))
}

/// Uniform sample of at most `cap` examples, class-balanced when every
/// example carries a class label. Output keeps input order.
pub fn sample_dataset(examples: &[TaskExample], cap: usize, rng: &mut Rng) -> Vec<TaskExample> {
    assert!(cap >= 1, "sampling cap must be at least 1");
    let labelled = !examples.is_empty() && examples.iter().all(|e| e.class_label.is_some());
    let mut chosen: Vec<usize> = if labelled {
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            by_class
                .entry(e.class_label.as_deref().unwrap())
                .or_default()
                .push(i);
        }
        let per_class = cap / by_class.len();
        by_class
            .values()
            .flat_map(|idx| sample_indices(idx, per_class, rng))
            .collect()
    } else {
        let all: Vec<usize> = (0..examples.len()).collect();
        sample_indices(&all, cap, rng)
    };
    chosen.sort_unstable();
    chosen.into_iter().map(|i| examples[i].clone()).collect()
}

fn sample_indices(indices: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    if indices.len() <= k {
        return indices.to_vec();
    }
    rand::seq::index::sample(rng, indices.len(), k)
        .into_iter()
        .map(|j| indices[j])
        .collect()
}

/// Joins a task input and its completion into one demonstration line.
pub fn render_demonstration(input_text: &str, completion: &str) -> Result<String> {
    let input = input_text.trim();
    let completion = completion.trim();
    if input.is_empty() || completion.is_empty() {
        return Err(Error::Data(
            "demonstration needs a nonempty input and completion".into(),
        ));
    }
    Ok(format!("{input} {completion}").replace(['\n', '\r'], " "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    #[default]
    RemainingClusters,
    TargetTask,
    AllTasks,
}

impl FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remaining-clusters" => Ok(PoolMode::RemainingClusters),
            "target-task" => Ok(PoolMode::TargetTask),
            "all-tasks" => Ok(PoolMode::AllTasks),
            other => Err(Error::config(format!("unknown pool mode `{other}`"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::RemainingClusters => "remaining-clusters",
            PoolMode::TargetTask => "target-task",
            PoolMode::AllTasks => "all-tasks",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: usize,
    pub text: String,
    pub source_task: String,
    pub source_example: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptPool {
    pub records: Vec<PromptRecord>,
    pub by_task: BTreeMap<String, Vec<usize>>,
}

impl PromptPool {
    /// Builds a pool from records, checking ids are dense and 0-based.
    pub fn from_records(records: Vec<PromptRecord>) -> Result<Self> {
        let mut by_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.prompt_id != i {
                return Err(Error::Data(format!(
                    "prompt ids must be contiguous from 0: position {i} holds id {}",
                    r.prompt_id
                )));
            }
            if r.text.is_empty() {
                return Err(Error::Data(format!("prompt {i} has empty text")));
            }
            by_task.entry(r.source_task.clone()).or_default().push(i);
        }
        Ok(PromptPool { records, by_task })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PromptRecord> {
        self.records.get(id)
    }

    /// Pool entry derived from a given training example, if any.
    pub fn find_source(&self, task_id: &str, example_id: &str) -> Option<usize> {
        self.by_task
            .get(task_id)?
            .iter()
            .copied()
            .find(|&id| self.records[id].source_example == example_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(io::read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.records)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolSpec {
    pub holdout_cluster: String,
    pub mode: PoolMode,
    /// Designated task for the target-task mode.
    pub target_task: Option<String>,
}

/// Tasks whose training demonstrations feed the pool for a given spec.
pub fn pool_tasks<'a>(taskset: &'a TaskSet, spec: &PoolSpec) -> Result<Vec<&'a Task>> {
    if !taskset.clusters().contains(spec.holdout_cluster.as_str()) {
        return Err(Error::config(format!(
            "unknown hold-out cluster `{}`",
            spec.holdout_cluster
        )));
    }
    let tasks: Vec<&Task> = match spec.mode {
        PoolMode::RemainingClusters => taskset
            .tasks
            .values()
            .filter(|t| t.spec.cluster_id != spec.holdout_cluster)
            .collect(),
        PoolMode::TargetTask => {
            let id = spec
                .target_task
                .as_deref()
                .ok_or_else(|| Error::config("pool mode target-task requires a target task"))?;
            let task = taskset
                .tasks
                .get(id)
                .ok_or_else(|| Error::config(format!("unknown target task `{id}`")))?;
            vec![task]
        }
        PoolMode::AllTasks => taskset.tasks.values().collect(),
    };
    Ok(tasks)
}

/// Builds the prompt pool from training demonstrations. Ids follow
/// (task_id, example_id) order.
pub fn build_pool(taskset: &TaskSet, spec: &PoolSpec) -> Result<PromptPool> {
    let mut sources: Vec<&TaskExample> = pool_tasks(taskset, spec)?
        .into_iter()
        .flat_map(|t| t.split(Split::Train))
        .collect();
    sources.sort_by(|a, b| (&a.task_id, &a.example_id).cmp(&(&b.task_id, &b.example_id)));
    let records = sources
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(PromptRecord {
                prompt_id: i,
                text: render_demonstration(&e.input_text, &e.completion)?,
                source_task: e.task_id.clone(),
                source_example: e.example_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::config(format!(
            "prompt pool for hold-out `{}` in mode {} is empty",
            spec.holdout_cluster, spec.mode
        )));
    }
    PromptPool::from_records(records)
}

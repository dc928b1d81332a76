//! Run configuration: a flat TOML key-value file, overridden by CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::labeling::LabelingConfig;
use crate::scoring::{ScoringConfig, DEFAULT_MAX_NEW_TOKENS};
use crate::taskdata::{MetricName, PoolMode, PoolSpec};
use crate::training::TrainConfig;

/// Per-task cap on sampled training examples.
pub const DEFAULT_SAMPLE_CAP: usize = 10_000;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    Mock,
    Remote,
}

impl std::str::FromStr for LmKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown lm `{other}` (expected mock or remote)")),
        }
    }
}

/// Every key is optional here; [`RunConfig::resolve`] applies defaults and
/// reports what is missing or invalid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub tasks_manifest: Option<PathBuf>,
    pub task_examples: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub pool_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,

    pub holdout_cluster: Option<String>,
    pub pool_mode: Option<PoolMode>,
    pub target_task: Option<String>,
    pub sample_cap: Option<usize>,

    pub subset_size: Option<usize>,
    pub negatives: Option<usize>,
    pub max_rounds: Option<usize>,
    pub train_fraction: Option<f64>,
    pub scoring_metric: Option<MetricName>,
    pub max_new_tokens: Option<usize>,

    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: Option<f64>,
    pub weight_decay: Option<f64>,
    pub embed_dim: Option<usize>,
    pub out_dim: Option<usize>,
    pub max_vocab: Option<usize>,
    pub max_seq_len: Option<usize>,

    pub k: Option<usize>,
    pub lm: Option<LmKind>,
    pub lm_url: Option<String>,
    pub mock_table: Option<PathBuf>,
}

impl RawConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut raw = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(
                v.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut raw.tasks_manifest,
            &mut raw.task_examples,
            &mut raw.out_dir,
            &mut raw.pool_path,
            &mut raw.labels_path,
            &mut raw.checkpoint_path,
            &mut raw.index_path,
            &mut raw.report_path,
            &mut raw.mock_table,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(raw)
    }

    /// Keys set in `over` replace those in `self`.
    pub fn overlay(self, over: RawConfig) -> RawConfig {
        macro_rules! pick {
            ($($f:ident),* $(,)?) => { RawConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            seed,
            workers,
            tasks_manifest,
            task_examples,
            out_dir,
            pool_path,
            labels_path,
            checkpoint_path,
            index_path,
            report_path,
            holdout_cluster,
            pool_mode,
            target_task,
            sample_cap,
            subset_size,
            negatives,
            max_rounds,
            train_fraction,
            scoring_metric,
            max_new_tokens,
            epochs,
            learning_rate,
            batch_size,
            warmup_steps,
            warmup_fraction,
            weight_decay,
            embed_dim,
            out_dim,
            max_vocab,
            max_seq_len,
            k,
            lm,
            lm_url,
            mock_table,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub tasks_manifest: PathBuf,
    pub task_examples: PathBuf,
    pub out_dir: PathBuf,
    pub pool: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub report: PathBuf,
}

impl Paths {
    pub fn label_checkpoint(&self) -> PathBuf {
        self.out_dir.join("label_progress.jsonl")
    }
    pub fn train_split(&self) -> PathBuf {
        self.out_dir.join("train.jsonl")
    }
    pub fn valid_split(&self) -> PathBuf {
        self.out_dir.join("valid.jsonl")
    }
    pub fn train_log(&self) -> PathBuf {
        self.out_dir.join("train_log.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }
    /// Report path for a given k, e.g. `report_k3.json`.
    pub fn report_for_k(&self, k: usize) -> PathBuf {
        let stem = self
            .report
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report");
        self.report.with_file_name(format!("{stem}_k{k}.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSelection {
    pub kind: LmKind,
    pub url: Option<String>,
    pub mock_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub pool: PoolSpec,
    pub sample_cap: usize,
    pub labeling: LabelingConfig,
    pub train_fraction: f64,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub lm: LmSelection,
}

impl RunConfig {
    /// Applies defaults and checks every key, listing all violations at once.
    pub fn resolve(raw: RawConfig) -> Result<Self> {
        let mut bad = Vec::new();
        let seed = raw.seed.unwrap_or_else(|| {
            bad.push("seed is required (set `seed` in the config or pass --seed)".to_string());
            0
        });
        let workers = raw.workers.unwrap_or(1);
        if workers == 0 {
            bad.push("workers must be at least 1".into());
        }
        let mut required = |p: Option<PathBuf>, key: &str| {
            p.unwrap_or_else(|| {
                bad.push(format!("{key} is required"));
                PathBuf::new()
            })
        };
        let tasks_manifest = required(raw.tasks_manifest, "tasks_manifest");
        let task_examples = required(raw.task_examples, "task_examples");
        let out_dir = raw.out_dir.unwrap_or_else(|| PathBuf::from("runs/default"));
        let paths = Paths {
            pool: raw.pool_path.unwrap_or_else(|| out_dir.join("pool.jsonl")),
            labels: raw
                .labels_path
                .unwrap_or_else(|| out_dir.join("labels.jsonl")),
            checkpoint: raw
                .checkpoint_path
                .unwrap_or_else(|| out_dir.join("checkpoint.json")),
            index: raw.index_path.unwrap_or_else(|| out_dir.join("index.json")),
            report: raw
                .report_path
                .unwrap_or_else(|| out_dir.join("report.json")),
            tasks_manifest,
            task_examples,
            out_dir,
        };

        let holdout_cluster = raw.holdout_cluster.unwrap_or_else(|| {
            bad.push("holdout_cluster is required".into());
            String::new()
        });
        let mode = raw.pool_mode.unwrap_or_default();
        if mode == PoolMode::TargetTask && raw.target_task.is_none() {
            bad.push("pool_mode target-task needs target_task".into());
        }
        let pool = PoolSpec {
            holdout_cluster,
            mode,
            target_task: raw.target_task,
        };

        let sample_cap = raw.sample_cap.unwrap_or(DEFAULT_SAMPLE_CAP);
        if sample_cap == 0 {
            bad.push("sample_cap must be at least 1".into());
        }

        let d = LabelingConfig::default();
        let labeling = LabelingConfig {
            subset_size: raw.subset_size.unwrap_or(d.subset_size),
            negatives: raw.negatives.unwrap_or(d.negatives),
            max_rounds: raw.max_rounds.unwrap_or(d.max_rounds),
        };
        bad.extend(labeling.violations());
        let train_fraction = raw.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION);
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            bad.push(format!(
                "train_fraction must lie in (0, 1), got {train_fraction}"
            ));
        }
        let scoring = ScoringConfig {
            metric: raw.scoring_metric.unwrap_or(MetricName::F1),
            max_new_tokens: raw.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
        };
        if scoring.max_new_tokens == 0 {
            bad.push("max_new_tokens must be at least 1".into());
        }

        let t = TrainConfig::default();
        let train = TrainConfig {
            epochs: raw.epochs.unwrap_or(t.epochs),
            learning_rate: raw.learning_rate.unwrap_or(t.learning_rate),
            batch_size: raw.batch_size.unwrap_or(t.batch_size),
            warmup_steps: raw.warmup_steps.unwrap_or(t.warmup_steps),
            warmup_fraction: raw.warmup_fraction.unwrap_or(t.warmup_fraction),
            weight_decay: raw.weight_decay.unwrap_or(t.weight_decay),
            embed_dim: raw.embed_dim.unwrap_or(t.embed_dim),
            out_dim: raw.out_dim.unwrap_or(t.out_dim),
            max_vocab: raw.max_vocab.unwrap_or(t.max_vocab),
            max_seq_len: raw.max_seq_len.unwrap_or(t.max_seq_len),
            seed,
            ..t
        };
        if !(train.learning_rate > 0.0) {
            bad.push(format!(
                "learning_rate must be positive, got {}",
                train.learning_rate
            ));
        }
        bad.extend(train.violations());

        let kind = raw.lm.unwrap_or(LmKind::Mock);
        if kind == LmKind::Remote && raw.lm_url.is_none() {
            bad.push("lm = remote needs lm_url".into());
        }
        let lm = LmSelection {
            kind,
            url: raw.lm_url,
            mock_table: raw.mock_table,
        };

        if bad.is_empty() {
            Ok(Self {
                seed,
                workers,
                paths,
                pool,
                sample_cap,
                labeling,
                train_fraction,
                scoring,
                train,
                k: raw.k.unwrap_or(crate::index::DEFAULT_TOP_K),
                lm,
            })
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Hash of every setting that influences outputs; excludes worker count and paths.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            pool: &'a PoolSpec,
            sample_cap: usize,
            labeling: &'a LabelingConfig,
            train_fraction: f64,
            scoring: &'a ScoringConfig,
            train: &'a TrainConfig,
            k: usize,
            lm: LmKind,
            lm_url: &'a Option<String>,
        }
        let h = Hashed {
            seed: self.seed,
            pool: &self.pool,
            sample_cap: self.sample_cap,
            labeling: &self.labeling,
            train_fraction: self.train_fraction,
            scoring: &self.scoring,
            train: &self.train,
            k: self.k,
            lm: self.lm.kind,
            lm_url: &self.lm.url,
        };
        sha256_hex(&serde_json::to_vec(&h).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RawConfig {
        RawConfig::from_toml_str(
            r#"
            seed = 7
            tasks_manifest = "t.json"
            task_examples = "e.jsonl"
            holdout_cluster = "c1"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_apply() {
        let c = RunConfig::resolve(minimal()).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.k, 3);
        assert_eq!(c.labeling, LabelingConfig::default());
        assert_eq!(c.pool.mode, PoolMode::RemainingClusters);
        assert_eq!(c.lm.kind, LmKind::Mock);
        assert_eq!(
            c.paths.report_for_k(0),
            PathBuf::from("runs/default/report_k0.json")
        );
    }

    #[test]
    fn every_violation_is_listed() {
        let raw = RawConfig {
            batch_size: Some(0),
            subset_size: Some(0),
            lm: Some(LmKind::Remote),
            ..RawConfig::default()
        };
        let Err(Error::Config(v)) = RunConfig::resolve(raw) else {
            panic!("expected config error")
        };
        let joined = v.join("\n");
        for key in [
            "seed",
            "tasks_manifest",
            "task_examples",
            "holdout_cluster",
            "batch size",
            "lm_url",
        ] {
            assert!(joined.contains(key), "missing {key} in {joined}");
        }
        assert!(v.len() >= 7);
    }

    #[test]
    fn flags_win() {
        let over = RawConfig {
            seed: Some(9),
            k: Some(0),
            ..RawConfig::default()
        };
        let c = RunConfig::resolve(minimal().overlay(over)).unwrap();
        assert_eq!((c.seed, c.k), (9, 0));
        assert_eq!(c.paths.tasks_manifest, PathBuf::from("t.json"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RawConfig::from_toml_str("sede = 1").is_err());
    }

    #[test]
    fn hash_ignores_workers() {
        let a = RunConfig::resolve(minimal()).unwrap();
        let b = RunConfig::resolve(minimal().overlay(RawConfig {
            workers: Some(4),
            ..RawConfig::default()
        }))
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::resolve(minimal().overlay(RawConfig {
            seed: Some(8),
            ..RawConfig::default()
        }))
        .unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn target_task_mode_needs_task() {
        let raw = minimal().overlay(RawConfig {
            pool_mode: Some(PoolMode::TargetTask),
            ..RawConfig::default()
        });
        assert!(RunConfig::resolve(raw).is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\ntasks_manifest = \"data/t.json\"\n").unwrap();
        let raw = RawConfig::load(&path).unwrap();
        assert_eq!(raw.tasks_manifest.unwrap(), dir.path().join("data/t.json"));
    }
}

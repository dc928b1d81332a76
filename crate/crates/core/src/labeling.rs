//! LM-supervised labeling of training examples with one positive prompt,
//! same-task hard negatives and cross-task random negatives.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_rng, Rng};
use crate::lmclient::LanguageModel;
use crate::scoring::{score_prompt, PromptScore, ScoringConfig};
use crate::taskdata::{PromptPool, PromptRecord, TaskExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// Candidates scored per round (L).
    pub subset_size: usize,
    /// Hard negatives and random negatives per example (B each).
    pub negatives: usize,
    /// Maximum sampling rounds (R).
    pub max_rounds: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            subset_size: 50,
            negatives: 20,
            max_rounds: 7,
        }
    }
}

impl LabelingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.subset_size == 0 {
            v.push("labeling subset size must be at least 1".to_string());
        }
        if self.negatives == 0 {
            v.push("number of negatives must be at least 1".to_string());
        }
        if self.max_rounds == 0 {
            v.push("max re-sampling rounds must be at least 1".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub example_id: String,
    pub task_id: String,
    pub input_text: String,
    pub positive_id: usize,
    pub hard_negative_ids: Vec<usize>,
    pub random_negative_ids: Vec<usize>,
    pub positive_score: f64,
    /// Rounds of candidate sampling used.
    pub rounds: usize,
}

impl LabeledInstance {
    /// All negatives: hard ones first, then random ones.
    pub fn negative_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.hard_negative_ids
            .iter()
            .chain(&self.random_negative_ids)
            .copied()
    }

    /// Checks the instance against its pool.
    pub fn validate(&self, pool: &PromptPool) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Labeling {
                example_id: self.example_id.clone(),
                reason,
            })
        };
        let task_of = |id: usize| pool.get(id).map(|r| r.source_task.as_str());
        if self.positive_score <= 0.0 {
            return fail(format!(
                "positive score {} is not positive",
                self.positive_score
            ));
        }
        if task_of(self.positive_id) != Some(self.task_id.as_str()) {
            return fail(format!(
                "positive {} is not from task {}",
                self.positive_id, self.task_id
            ));
        }
        if self.hard_negative_ids.contains(&self.positive_id) {
            return fail("positive listed as hard negative".into());
        }
        for &id in &self.hard_negative_ids {
            if task_of(id) != Some(self.task_id.as_str()) {
                return fail(format!("hard negative {id} is not a same-task prompt"));
            }
        }
        for &id in &self.random_negative_ids {
            match task_of(id) {
                Some(t) if t != self.task_id => {}
                _ => return fail(format!("random negative {id} is not a cross-task prompt")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum LabelOutcome {
    Labeled(LabeledInstance),
    Filtered {
        task_id: String,
        example_id: String,
        rounds: usize,
        scored: usize,
    },
}

impl LabelOutcome {
    pub fn key(&self) -> (&str, &str) {
        match self {
            LabelOutcome::Labeled(i) => (&i.task_id, &i.example_id),
            LabelOutcome::Filtered {
                task_id,
                example_id,
                ..
            } => (task_id, example_id),
        }
    }

    pub fn instance(&self) -> Option<&LabeledInstance> {
        match self {
            LabelOutcome::Labeled(i) => Some(i),
            LabelOutcome::Filtered { .. } => None,
        }
    }
}

fn eligible_candidates(
    pool: &PromptPool,
    example: &TaskExample,
    exclude: &BTreeSet<usize>,
) -> Vec<usize> {
    let own = pool.find_source(&example.task_id, &example.example_id);
    pool.by_task
        .get(&example.task_id)
        .map(|ids| {
            ids.iter()
                .copied()
                .filter(|id| !exclude.contains(id) && Some(*id) != own)
                .collect()
        })
        .unwrap_or_default()
}

/// Uniform sample without replacement of up to `subset_size` same-task
/// prompts, skipping `exclude` and the example's own demonstration.
pub fn sample_candidates<'p>(
    pool: &'p PromptPool,
    example: &TaskExample,
    subset_size: usize,
    rng: &mut Rng,
    exclude: &BTreeSet<usize>,
) -> Result<Vec<&'p PromptRecord>> {
    let eligible = eligible_candidates(pool, example, exclude);
    if eligible.is_empty() {
        return Err(Error::Labeling {
            example_id: example.example_id.clone(),
            reason: format!(
                "no eligible prompt from task {} in the pool",
                example.task_id
            ),
        });
    }
    let picked = if eligible.len() <= subset_size {
        let mut all = eligible;
        all.shuffle(rng);
        all
    } else {
        index::sample(rng, eligible.len(), subset_size)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    Ok(picked.into_iter().map(|id| &pool.records[id]).collect())
}

/// Scores sampled candidates round by round until one scores above zero,
/// then picks the positive, hard negatives and random negatives.
pub fn label_example(
    lm: &dyn LanguageModel,
    pool: &PromptPool,
    example: &TaskExample,
    cfg: &LabelingConfig,
    scoring: &ScoringConfig,
    rng: &mut Rng,
) -> Result<LabelOutcome> {
    let cross_task: Vec<usize> = pool
        .records
        .iter()
        .filter(|r| r.source_task != example.task_id)
        .map(|r| r.prompt_id)
        .collect();
    if cross_task.len() < cfg.negatives {
        return Err(Error::config(format!(
            "pool has {} prompts outside task {}, need {} random negatives",
            cross_task.len(),
            example.task_id,
            cfg.negatives
        )));
    }

    let mut scored: Vec<PromptScore> = Vec::new();
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        if rounds > 0 && eligible_candidates(pool, example, &seen).is_empty() {
            break;
        }
        let batch = sample_candidates(pool, example, cfg.subset_size, rng, &seen)?;
        rounds += 1;
        let mut round_best = 0.0f64;
        for prompt in batch {
            let s = score_prompt(lm, prompt, example, scoring)?;
            if !(0.0..=1.0).contains(&s.value) {
                return Err(Error::Internal(format!(
                    "prompt score {} outside [0, 1]",
                    s.value
                )));
            }
            round_best = round_best.max(s.value);
            seen.insert(s.prompt_id);
            scored.push(s);
        }
        if round_best > 0.0 {
            break;
        }
    }

    // (score desc, id asc) gives the positive; (score asc, id asc) the hard negatives
    scored.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.prompt_id.cmp(&b.prompt_id))
    });
    let positive = match scored.first() {
        Some(p) if p.value > 0.0 => *p,
        _ => {
            return Ok(LabelOutcome::Filtered {
                task_id: example.task_id.clone(),
                example_id: example.example_id.clone(),
                rounds,
                scored: scored.len(),
            })
        }
    };
    let mut rest: Vec<PromptScore> = scored[1..].to_vec();
    rest.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.prompt_id.cmp(&b.prompt_id))
    });
    let hard_negative_ids = rest
        .iter()
        .take(cfg.negatives)
        .map(|s| s.prompt_id)
        .collect();
    let random_negative_ids = index::sample(rng, cross_task.len(), cfg.negatives)
        .into_iter()
        .map(|i| cross_task[i])
        .collect();

    Ok(LabelOutcome::Labeled(LabeledInstance {
        example_id: example.example_id.clone(),
        task_id: example.task_id.clone(),
        input_text: example.input_text.clone(),
        positive_id: positive.prompt_id,
        hard_negative_ids,
        random_negative_ids,
        positive_score: positive.value,
        rounds,
    }))
}

/// Random stream for one example, independent of processing order.
pub fn example_rng(seed: u64, example: &TaskExample) -> Rng {
    derive_rng(seed, &["label", &example.task_id, &example.example_id])
}

/// Labels examples in parallel on the current rayon pool; output order follows input order.
pub fn label_examples(
    lm: &dyn LanguageModel,
    pool: &PromptPool,
    examples: &[&TaskExample],
    cfg: &LabelingConfig,
    scoring: &ScoringConfig,
    seed: u64,
) -> Result<Vec<LabelOutcome>> {
    examples
        .par_iter()
        .map(|e| label_example(lm, pool, e, cfg, scoring, &mut example_rng(seed, e)))
        .collect()
}

/// Append-only JSONL log of finished examples, used to resume an interrupted labeling run.
pub struct LabelCheckpoint {
    path: std::path::PathBuf,
}

impl LabelCheckpoint {
    pub fn new(path: impl Into<std::path::PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Outcomes recorded so far. A torn final line from an interrupted write is ignored.
    pub fn load(&self) -> Result<Vec<LabelOutcome>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)
            .map_err(|e| Error::io(format!("reading {}", self.path.display()), e))?;
        let mut out = Vec::new();
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(o) => out.push(o),
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
                Err(e) => return Err(Error::json(format!("{}:{}", self.path.display(), i + 1), e)),
            }
        }
        Ok(out)
    }

    pub fn append(&self, outcomes: &[LabelOutcome]) -> Result<()> {
        let ctx = || format!("appending to {}", self.path.display());
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(ctx(), e))?;
        let mut buf = String::new();
        for o in outcomes {
            buf.push_str(&serde_json::to_string(o).map_err(|e| Error::json(ctx(), e))?);
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        file.sync_data().map_err(|e| Error::io(ctx(), e))
    }

    /// Rewrites the log so it ends on a complete line (drops a torn tail).
    pub fn repair(&self, outcomes: &[LabelOutcome]) -> Result<()> {
        let _ = std::fs::remove_file(&self.path);
        self.append(outcomes)
    }
}

/// Labels `examples` in chunks, appending each finished chunk to `checkpoint`.
/// Examples already in the checkpoint are skipped. Returns outcomes in input order.
pub fn label_resumable(
    lm: &dyn LanguageModel,
    pool: &PromptPool,
    examples: &[&TaskExample],
    cfg: &LabelingConfig,
    scoring: &ScoringConfig,
    seed: u64,
    checkpoint: &LabelCheckpoint,
    chunk_size: usize,
) -> Result<Vec<LabelOutcome>> {
    let mut done = checkpoint.load()?;
    checkpoint.repair(&done)?;
    let finished: BTreeSet<(String, String)> = done
        .iter()
        .map(|o| (o.key().0.to_string(), o.key().1.to_string()))
        .collect();
    let todo: Vec<&TaskExample> = examples
        .iter()
        .copied()
        .filter(|e| !finished.contains(&(e.task_id.clone(), e.example_id.clone())))
        .collect();
    if !finished.is_empty() {
        log::info!(
            "resuming labeling: {} done, {} remaining",
            finished.len(),
            todo.len()
        );
    }
    for chunk in todo.chunks(chunk_size.max(1)) {
        let outcomes = label_examples(lm, pool, chunk, cfg, scoring, seed)?;
        checkpoint.append(&outcomes)?;
        done.extend(outcomes);
    }
    let order: std::collections::HashMap<(&str, &str), usize> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.task_id.as_str(), e.example_id.as_str()), i))
        .collect();
    let mut ranked: Vec<(usize, LabelOutcome)> = Vec::with_capacity(done.len());
    for o in done {
        if let Some(&i) = order.get(&o.key()) {
            ranked.push((i, o));
        }
    }
    ranked.sort_by_key(|(i, _)| *i);
    Ok(ranked.into_iter().map(|(_, o)| o).collect())
}

/// Shuffles and splits into (train, valid) with `ceil(fraction * n)` training
/// instances, keeping at least one for validation.
pub fn split_train_valid<T: Clone>(
    items: &[T],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 labeled instances to split, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n_train = ((fraction * n as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut shuffled = items.to_vec();
    shuffled.shuffle(rng);
    let valid = shuffled.split_off(n_train);
    Ok((shuffled, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmclient::ScriptedLm;
    use crate::taskdata::{QuestionType, Split};
    use rand::SeedableRng;

    fn pool(per_task: &[(&str, usize)]) -> PromptPool {
        let mut records = Vec::new();
        for (task, n) in per_task {
            for i in 0..*n {
                records.push(PromptRecord {
                    prompt_id: records.len(),
                    text: format!("{task} demo {i} p{}", records.len()),
                    source_task: task.to_string(),
                    source_example: format!("e{i}"),
                });
            }
        }
        PromptPool::from_records(records).unwrap()
    }

    fn example(task: &str, id: &str) -> TaskExample {
        TaskExample {
            example_id: id.into(),
            task_id: task.into(),
            cluster_id: "c".into(),
            input_text: format!("query {id}"),
            completion: "gold".into(),
            question_type: QuestionType::TextCompletion,
            options: vec![],
            gold_option_index: None,
            class_label: None,
            split: Split::Train,
        }
    }

    fn prompt_id_of(ctx: &str) -> usize {
        let first = ctx.split('\n').next().unwrap();
        first.rsplit(" p").next().unwrap().parse().unwrap()
    }

    /// Completion equals the gold answer exactly for the listed prompt ids.
    fn lm_good_for(ids: &'static [usize]) -> ScriptedLm {
        ScriptedLm::new(
            "good-for",
            move |ctx| {
                if ids.contains(&prompt_id_of(ctx)) {
                    "gold".into()
                } else {
                    "junk".into()
                }
            },
            |_, _| vec![-1.0],
        )
    }

    #[test]
    fn candidate_sampling() {
        let p = pool(&[("a", 200), ("b", 30)]);
        let mut rng = Rng::seed_from_u64(1);
        let ex = example("a", "e7");
        let got = sample_candidates(&p, &ex, 50, &mut rng, &BTreeSet::new()).unwrap();
        assert_eq!(got.len(), 50);
        let ids: BTreeSet<_> = got.iter().map(|r| r.prompt_id).collect();
        assert_eq!(ids.len(), 50);
        assert!(got.iter().all(|r| r.source_task == "a"));
        assert!(!ids.contains(&7), "own demonstration sampled");

        let small = pool(&[("a", 10), ("b", 30)]);
        let got =
            sample_candidates(&small, &example("a", "zz"), 50, &mut rng, &BTreeSet::new()).unwrap();
        assert_eq!(got.len(), 10);
        assert!(
            sample_candidates(&small, &example("c", "x"), 50, &mut rng, &BTreeSet::new()).is_err()
        );
    }

    #[test]
    fn all_zero_scores_filter_the_example() {
        let p = pool(&[("a", 500), ("b", 30)]);
        let lm = ScriptedLm::new("zero", |_| "junk".into(), |_, _| vec![-1.0]);
        let cfg = LabelingConfig::default();
        let mut rng = Rng::seed_from_u64(3);
        match label_example(
            &lm,
            &p,
            &example("a", "x"),
            &cfg,
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap()
        {
            LabelOutcome::Filtered { rounds, scored, .. } => {
                assert_eq!(rounds, 7);
                assert_eq!(scored, 350);
            }
            other => panic!("expected filtered, got {other:?}"),
        }
    }

    #[test]
    fn exhausted_pool_filters_early() {
        let p = pool(&[("a", 60), ("b", 30)]);
        let lm = ScriptedLm::new("zero", |_| "junk".into(), |_, _| vec![-1.0]);
        let mut rng = Rng::seed_from_u64(3);
        match label_example(
            &lm,
            &p,
            &example("a", "x"),
            &LabelingConfig::default(),
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap()
        {
            LabelOutcome::Filtered { rounds, scored, .. } => {
                assert_eq!(rounds, 2);
                assert_eq!(scored, 60);
            }
            other => panic!("expected filtered, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_on_first_positive_round() {
        // every prompt of task a is good: round 1 already has a positive
        let ids: &'static [usize] = Box::leak((0..200).collect::<Vec<_>>().into_boxed_slice());
        let p = pool(&[("a", 200), ("b", 30)]);
        let mut rng = Rng::seed_from_u64(4);
        let out = label_example(
            &lm_good_for(ids),
            &p,
            &example("a", "x"),
            &LabelingConfig::default(),
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap();
        let inst = out.instance().unwrap();
        assert_eq!(inst.rounds, 1);
        assert_eq!(inst.positive_score, 1.0);
        inst.validate(&p).unwrap();
        assert_eq!(inst.hard_negative_ids.len(), 20);
        assert_eq!(inst.random_negative_ids.len(), 20);
        let r: BTreeSet<_> = inst.random_negative_ids.iter().collect();
        assert_eq!(r.len(), 20);
    }

    #[test]
    fn single_positive_among_zeros() {
        // 50 same-task prompts, only id 13 scores; L = 50 so one round covers all
        let p = pool(&[("a", 50), ("b", 30)]);
        let mut rng = Rng::seed_from_u64(5);
        let out = label_example(
            &lm_good_for(&[13]),
            &p,
            &example("a", "x"),
            &LabelingConfig::default(),
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap();
        let inst = out.instance().unwrap();
        assert_eq!(inst.positive_id, 13);
        // brute force: the 20 lowest-scoring (all zero) by id order, excluding the positive
        let oracle: Vec<usize> = (0..50).filter(|&i| i != 13).take(20).collect();
        assert_eq!(inst.hard_negative_ids, oracle);
    }

    #[test]
    fn hard_negative_shortfall_keeps_what_exists() {
        let p = pool(&[("a", 6), ("b", 30)]);
        let mut rng = Rng::seed_from_u64(5);
        let out = label_example(
            &lm_good_for(&[2]),
            &p,
            &example("a", "x"),
            &LabelingConfig::default(),
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap();
        let inst = out.instance().unwrap();
        assert_eq!(inst.hard_negative_ids.len(), 5);
        inst.validate(&p).unwrap();
    }

    #[test]
    fn too_few_cross_task_prompts_is_config_error() {
        let p = pool(&[("a", 60), ("b", 5)]);
        let mut rng = Rng::seed_from_u64(5);
        let err = label_example(
            &lm_good_for(&[1]),
            &p,
            &example("a", "x"),
            &LabelingConfig::default(),
            &ScoringConfig::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn parallel_labeling_matches_sequential() {
        let p = pool(&[("a", 120), ("b", 80)]);
        let ids: &'static [usize] = Box::leak(
            (0..200)
                .filter(|i| i % 7 == 0)
                .collect::<Vec<_>>()
                .into_boxed_slice(),
        );
        let lm = lm_good_for(ids);
        let examples: Vec<TaskExample> = (0..30)
            .map(|i| example(if i % 2 == 0 { "a" } else { "b" }, &format!("q{i}")))
            .collect();
        let refs: Vec<&TaskExample> = examples.iter().collect();
        let cfg = LabelingConfig {
            subset_size: 10,
            negatives: 5,
            max_rounds: 3,
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one
            .install(|| label_examples(&lm, &p, &refs, &cfg, &ScoringConfig::default(), 9))
            .unwrap();
        let b = four
            .install(|| label_examples(&lm, &p, &refs, &cfg, &ScoringConfig::default(), 9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resumable_labeling_matches_uninterrupted() {
        let p = pool(&[("a", 120), ("b", 80)]);
        let ids: &'static [usize] = Box::leak(
            (0..200)
                .filter(|i| i % 5 == 0)
                .collect::<Vec<_>>()
                .into_boxed_slice(),
        );
        let lm = lm_good_for(ids);
        let examples: Vec<TaskExample> = (0..25)
            .map(|i| example(if i % 2 == 0 { "a" } else { "b" }, &format!("q{i:02}")))
            .collect();
        let refs: Vec<&TaskExample> = examples.iter().collect();
        let cfg = LabelingConfig {
            subset_size: 10,
            negatives: 5,
            max_rounds: 3,
        };
        let sc = ScoringConfig::default();
        let full = label_examples(&lm, &p, &refs, &cfg, &sc, 9).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = LabelCheckpoint::new(dir.path().join("labels.ckpt.jsonl"));
        // simulate an interrupted run: first 10 done, then a torn line
        ckpt.append(&full[..10]).unwrap();
        let mut f = OpenOptions::new().append(true).open(ckpt.path()).unwrap();
        f.write_all(b"{\"outcome\":\"lab").unwrap();
        drop(f);
        let resumed = label_resumable(&lm, &p, &refs, &cfg, &sc, 9, &ckpt, 4).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(ckpt.load().unwrap().len(), 25);
    }

    #[test]
    fn split_sizes() {
        let mut rng = Rng::seed_from_u64(0);
        let items: Vec<usize> = (0..100).collect();
        let (t, v) = split_train_valid(&items, 0.9, &mut rng).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
        let mut union: Vec<usize> = t.iter().chain(&v).copied().collect();
        union.sort();
        assert_eq!(union, items);

        let (t, v) = split_train_valid(&items[..10], 0.9, &mut rng).unwrap();
        assert_eq!((t.len(), v.len()), (9, 1));
        let (t, v) = split_train_valid(&items[..2], 0.9, &mut rng).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_train_valid(&items[..1], 0.9, &mut rng).is_err());
    }
}

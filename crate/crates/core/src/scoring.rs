//! Task metrics and LM-based prompt scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::assemble_input;
use crate::lmclient::{argmax_likelihood, CompletionRequest, LanguageModel};
use crate::taskdata::{MetricName, PromptRecord, QuestionType, TaskExample};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: usize,
    pub value: f64,
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// F1 over token multisets of the normalized strings.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let mut pred = normalize_tokens(prediction);
    let mut gold = normalize_tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    pred.sort_unstable();
    gold.sort_unstable();
    // merge-count the multiset intersection
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < pred.len() && j < gold.len() {
        match pred[i].cmp(&gold[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_tokens(prediction) == normalize_tokens(gold) {
        1.0
    } else {
        0.0
    }
}

/// Text metric by name. Accuracy on free text is exact match.
pub fn text_metric(metric: MetricName, prediction: &str, gold: &str) -> f64 {
    match metric {
        MetricName::F1 => token_f1(prediction, gold),
        MetricName::Em | MetricName::Accuracy => exact_match(prediction, gold),
    }
}

/// Accuracy times the gold option's share of total per-token likelihood.
pub fn choice_score(likelihoods: &[f64], predicted: usize, gold: usize) -> f64 {
    if predicted != gold {
        return 0.0;
    }
    let total: f64 = likelihoods.iter().sum();
    likelihoods[gold] / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Metric for text-completion scoring.
    pub metric: MetricName,
    pub max_new_tokens: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            metric: MetricName::F1,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

pub fn score_text_completion(
    lm: &dyn LanguageModel,
    prompt: &PromptRecord,
    example: &TaskExample,
    metric: MetricName,
    max_new_tokens: usize,
) -> Result<PromptScore> {
    if example.question_type != QuestionType::TextCompletion {
        return Err(Error::Data(format!(
            "example {} is not text-completion",
            example.example_id
        )));
    }
    let context = assemble_input(&[prompt.text.as_str()], &example.input_text);
    let prediction = lm.greedy_complete(&CompletionRequest::new(context, max_new_tokens))?;
    Ok(PromptScore {
        prompt_id: prompt.prompt_id,
        value: text_metric(metric, &prediction, &example.completion),
    })
}

pub fn score_multiple_choice(
    lm: &dyn LanguageModel,
    prompt: &PromptRecord,
    example: &TaskExample,
) -> Result<PromptScore> {
    let gold = match (example.question_type, example.gold_option_index) {
        (QuestionType::MultipleChoice, Some(g)) if g < example.options.len() => g,
        _ => {
            return Err(Error::Data(format!(
                "example {} is not a well-formed multiple-choice example",
                example.example_id
            )))
        }
    };
    let context = assemble_input(&[prompt.text.as_str()], &example.input_text);
    let scores = lm.option_likelihoods(&context, &example.options)?;
    let predicted = argmax_likelihood(&scores);
    let lh: Vec<f64> = scores.iter().map(|s| s.per_token_likelihood).collect();
    Ok(PromptScore {
        prompt_id: prompt.prompt_id,
        value: choice_score(&lh, predicted, gold),
    })
}

/// Scores `prompt` for `example` with the method matching its question type.
pub fn score_prompt(
    lm: &dyn LanguageModel,
    prompt: &PromptRecord,
    example: &TaskExample,
    cfg: &ScoringConfig,
) -> Result<PromptScore> {
    match example.question_type {
        QuestionType::TextCompletion => {
            score_text_completion(lm, prompt, example, cfg.metric, cfg.max_new_tokens)
        }
        QuestionType::MultipleChoice => score_multiple_choice(lm, prompt, example),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmclient::ScriptedLm;
    use crate::taskdata::Split;
    use proptest::prelude::*;

    fn prompt() -> PromptRecord {
        PromptRecord {
            prompt_id: 4,
            text: "demo text A: z".into(),
            source_task: "t".into(),
            source_example: "e".into(),
        }
    }

    fn text_example(gold: &str) -> TaskExample {
        TaskExample {
            example_id: "x1".into(),
            task_id: "t".into(),
            cluster_id: "c".into(),
            input_text: "Q: who? A:".into(),
            completion: gold.into(),
            question_type: QuestionType::TextCompletion,
            options: vec![],
            gold_option_index: None,
            class_label: None,
            split: Split::Train,
        }
    }

    fn mc_example(options: &[&str], gold: usize) -> TaskExample {
        TaskExample {
            question_type: QuestionType::MultipleChoice,
            options: options.iter().map(|s| s.to_string()).collect(),
            gold_option_index: Some(gold),
            completion: options[gold].to_string(),
            ..text_example("")
        }
    }

    /// Single-token options whose probability is looked up by option text.
    fn table_lm(table: &'static [(&'static str, f64)]) -> ScriptedLm {
        ScriptedLm::new(
            "table",
            |_| String::new(),
            move |_, opt| {
                let p = table.iter().find(|(o, _)| *o == opt).unwrap().1;
                vec![p.ln()]
            },
        )
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("a b", "a b"), 1.0);
        assert_eq!(token_f1("a b", "c d"), 0.0);
        assert_eq!(token_f1("a b", "b c"), 0.5);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("a", ""), 0.0);
        assert_eq!(token_f1("", "a"), 0.0);
        // repeated tokens count as a multiset: P = 1/2, R = 1
        assert!((token_f1("a a", "a") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("X.", "x"), 1.0);
        assert_eq!(exact_match("x", "y"), 0.0);
        assert_eq!(exact_match("", ""), 1.0);
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_em_reflexive(a in "[a-c ,.]{0,12}", b in "[a-c ,.]{0,12}") {
            prop_assert_eq!(token_f1(&a, &b), token_f1(&b, &a));
            prop_assert_eq!(exact_match(&a, &a), 1.0);
            let f = token_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn text_completion_scores() {
        let echo = ScriptedLm::new("gold", |_| "Lee".to_string(), |_, _| vec![-1.0]);
        let s = score_text_completion(&echo, &prompt(), &text_example("Lee"), MetricName::F1, 32)
            .unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.prompt_id, 4);

        let junk = ScriptedLm::new("junk", |_| "zzz qqq".to_string(), |_, _| vec![-1.0]);
        let s = score_text_completion(&junk, &prompt(), &text_example("Lee"), MetricName::F1, 32)
            .unwrap();
        assert_eq!(s.value, 0.0);

        // "the name is lee" vs gold "lee smith": P = 1/4, R = 1/2, F1 = 1/3
        let partial = ScriptedLm::new(
            "partial",
            |_| "the name is Lee".to_string(),
            |_, _| vec![-1.0],
        );
        let s = score_text_completion(
            &partial,
            &prompt(),
            &text_example("Lee Smith"),
            MetricName::F1,
            32,
        )
        .unwrap();
        assert!((s.value - 1.0 / 3.0).abs() < 1e-15);
        let s = score_text_completion(
            &partial,
            &prompt(),
            &text_example("Lee Smith"),
            MetricName::Em,
            32,
        )
        .unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn text_completion_context_is_prompt_newline_input() {
        let lm = ScriptedLm::new(
            "ctx",
            |ctx| {
                if ctx == "demo text A: z\nQ: who? A:" {
                    "ok".into()
                } else {
                    "bad".into()
                }
            },
            |_, _| vec![-1.0],
        );
        let s =
            score_text_completion(&lm, &prompt(), &text_example("ok"), MetricName::Em, 4).unwrap();
        assert_eq!(s.value, 1.0);
    }

    #[test]
    fn multiple_choice_arithmetic() {
        let lm = table_lm(&[("yes", 0.6), ("no", 0.2)]);
        let s = score_multiple_choice(&lm, &prompt(), &mc_example(&["yes", "no"], 0)).unwrap();
        assert!((s.value - 0.75).abs() < 1e-12);
        let s = score_multiple_choice(&lm, &prompt(), &mc_example(&["yes", "no"], 1)).unwrap();
        assert_eq!(s.value, 0.0);

        let lm = table_lm(&[("a", 0.3), ("b", 0.3), ("c", 0.3)]);
        let s = score_multiple_choice(&lm, &prompt(), &mc_example(&["a", "b", "c"], 0)).unwrap();
        assert!((s.value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn choice_score_scale_invariant() {
        let lh = [0.5, 0.1, 0.2];
        let base = choice_score(&lh, 0, 0);
        for c in [1e-3, 0.7, 1.0, 42.0] {
            let scaled: Vec<f64> = lh.iter().map(|x| x * c).collect();
            assert!((choice_score(&scaled, 0, 0) - base).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_question_type_is_error() {
        let lm = table_lm(&[("a", 0.3)]);
        assert!(score_multiple_choice(&lm, &prompt(), &text_example("x")).is_err());
        assert!(score_text_completion(
            &lm,
            &prompt(),
            &mc_example(&["a", "b"], 0),
            MetricName::F1,
            4
        )
        .is_err());
    }
}

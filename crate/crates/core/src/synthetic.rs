//! Deterministic topic corpus for end-to-end runs with [`TopicLm`].
//!
//! Four clusters of two tasks each. Every example hides exactly one of four
//! topics, expressed through a few topic member words mixed with neutral
//! words; the answer is always the topic's label. Each task has its own
//! template keywords, so demonstrations from a task resemble that task's
//! inputs. Two clusters are multiple choice, two are text completion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{self, derive_rng};
use crate::lmclient::{MockTable, MockTopic, TopicLm};
use crate::taskdata::{MetricName, QuestionType, RawExample, Split, TaskSpec, Template};

pub const MANIFEST_FILE: &str = "tasks.json";
pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const MOCK_TABLE_FILE: &str = "mock_lm.json";

const TOPICS: [(&str, &str, [&str; 8]); 4] = [
    (
        "sport",
        "sports",
        [
            "football", "tennis", "goal", "league", "coach", "stadium", "referee", "trophy",
        ],
    ),
    (
        "food",
        "cooking",
        [
            "bread", "cheese", "recipe", "oven", "spice", "dinner", "kitchen", "soup",
        ],
    ),
    (
        "music",
        "music",
        [
            "guitar", "melody", "concert", "drum", "song", "chorus", "piano", "rhythm",
        ],
    ),
    (
        "travel",
        "travel",
        [
            "airport", "luggage", "hotel", "passport", "train", "beach", "journey", "ticket",
        ],
    ),
];

const NEUTRAL: [&str; 16] = [
    "the",
    "a",
    "yesterday",
    "people",
    "new",
    "city",
    "friend",
    "week",
    "story",
    "report",
    "about",
    "with",
    "many",
    "old",
    "small",
    "local",
];

const FILLERS: [&str; 6] = ["maybe", "thing", "stuff", "perhaps", "general", "other"];

/// (cluster, task, question type, per-template (keyword phrase, layout)).
struct TaskShape {
    cluster: &'static str,
    task: &'static str,
    question_type: QuestionType,
    prompts: [&'static str; 2],
}

const SHAPES: [TaskShape; 8] = [
    TaskShape {
        cluster: "subject_qa",
        task: "passage_subject",
        question_type: QuestionType::TextCompletion,
        prompts: [
            "passage: {text} question: what subject does the passage discuss? answer:",
            "what subject does this passage discuss? passage: {text}",
        ],
    },
    TaskShape {
        cluster: "subject_qa",
        task: "diary_theme",
        question_type: QuestionType::TextCompletion,
        prompts: [
            "diary entry: {text} the theme of this diary entry is",
            "name the theme of the diary entry. {text}",
        ],
    },
    TaskShape {
        cluster: "headline_tagging",
        task: "headline_tag",
        question_type: QuestionType::TextCompletion,
        prompts: [
            "headline: {text} tag for the headline:",
            "give one tag to the headline \"{text}\"",
        ],
    },
    TaskShape {
        cluster: "headline_tagging",
        task: "caption_keyword",
        question_type: QuestionType::TextCompletion,
        prompts: [
            "photo caption: {text} keyword of the caption:",
            "which keyword fits the photo caption? {text}",
        ],
    },
    TaskShape {
        cluster: "forum_classification",
        task: "forum_board",
        question_type: QuestionType::MultipleChoice,
        prompts: [
            "forum post: {text} which board should the forum post go to?",
            "choose the board for this forum post. {text}",
        ],
    },
    TaskShape {
        cluster: "forum_classification",
        task: "email_folder",
        question_type: QuestionType::MultipleChoice,
        prompts: [
            "email body: {text} pick the folder for this email.",
            "file this email into a folder: {text}",
        ],
    },
    TaskShape {
        cluster: "review_classification",
        task: "podcast_genre",
        question_type: QuestionType::MultipleChoice,
        prompts: [
            "podcast episode summary: {text} what genre is the podcast?",
            "select the podcast genre. episode: {text}",
        ],
    },
    TaskShape {
        cluster: "review_classification",
        task: "magazine_section",
        question_type: QuestionType::MultipleChoice,
        prompts: [
            "magazine article excerpt: {text} in which magazine section does it belong?",
            "assign the magazine section. excerpt: {text}",
        ],
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusShape {
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            train_per_task: 400,
            test_per_task: 40,
            seed: 2023,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub specs: Vec<TaskSpec>,
    pub examples: Vec<RawExample>,
    pub mock_table: MockTable,
}

fn labels() -> Vec<String> {
    TOPICS.iter().map(|(_, l, _)| l.to_string()).collect()
}

fn options_block() -> String {
    let mut s = String::from("\nOPTIONS:");
    for l in labels() {
        s.push_str("\n- ");
        s.push_str(&l);
    }
    s
}

pub fn task_specs() -> Vec<TaskSpec> {
    SHAPES
        .iter()
        .map(|s| {
            let mc = s.question_type == QuestionType::MultipleChoice;
            let templates = s
                .prompts
                .iter()
                .enumerate()
                .map(|(i, p)| Template {
                    id: format!("{}_{i}", s.task),
                    pattern: if mc {
                        format!("{p}{}", options_block())
                    } else {
                        p.to_string()
                    },
                    completion_pattern: "{label}".into(),
                })
                .collect();
            TaskSpec {
                task_id: s.task.into(),
                cluster_id: s.cluster.into(),
                question_type: s.question_type,
                metric_name: if mc {
                    MetricName::Accuracy
                } else {
                    MetricName::F1
                },
                templates,
                max_new_tokens: Some(4),
            }
        })
        .collect()
}

pub fn mock_table(seed: u64) -> MockTable {
    MockTable {
        topics: TOPICS
            .iter()
            .map(|(name, label, members)| MockTopic {
                name: name.to_string(),
                label: label.to_string(),
                members: members.iter().map(|m| m.to_string()).collect(),
            })
            .collect(),
        fillers: FILLERS.iter().map(|f| f.to_string()).collect(),
        boost: 2.0,
        base_low: -4.0,
        base_high: -2.0,
        seed,
    }
}

pub fn mock_lm(seed: u64) -> TopicLm {
    TopicLm::new(mock_table(seed)).expect("built-in mock table is valid")
}

/// Two or three member words of one topic shuffled among three to five neutral words.
fn sentence(topic: usize, rng: &mut io::Rng) -> String {
    let members = TOPICS[topic].2;
    let n_members = rng.random_range(2..=3);
    let n_neutral = rng.random_range(3..=5);
    let mut words: Vec<&str> = members.choose_multiple(rng, n_members).copied().collect();
    words.extend(NEUTRAL.choose_multiple(rng, n_neutral).copied());
    words.shuffle(rng);
    words.join(" ")
}

pub fn generate(shape: &CorpusShape) -> Corpus {
    let specs = task_specs();
    let labels = labels();
    let mut examples = Vec::new();
    for spec in &specs {
        let mc = spec.question_type == QuestionType::MultipleChoice;
        let mut rng = derive_rng(shape.seed, &["synthetic", &spec.task_id]);
        let total = shape.train_per_task + shape.test_per_task;
        for i in 0..total {
            // topics cycle so every split is class-balanced
            let topic = i % TOPICS.len();
            let label = labels[topic].clone();
            let fields = BTreeMap::from([
                ("text".to_string(), sentence(topic, &mut rng)),
                ("label".to_string(), label.clone()),
            ]);
            examples.push(RawExample {
                example_id: format!("{}-{i:04}", spec.task_id),
                task_id: spec.task_id.clone(),
                fields,
                options: if mc { labels.clone() } else { Vec::new() },
                gold_option_index: mc.then_some(topic),
                class_label: Some(label),
                split: if i < shape.train_per_task {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    Corpus {
        specs,
        examples,
        mock_table: mock_table(shape.seed),
    }
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(MANIFEST_FILE), &self.specs)?;
        io::write_jsonl(&dir.join(EXAMPLES_FILE), &self.examples)?;
        io::write_json(&dir.join(MOCK_TABLE_FILE), &self.mock_table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmclient::LanguageModel;
    use crate::taskdata::TaskSet;
    use crate::text::words;

    #[test]
    fn generation_is_deterministic() {
        let shape = CorpusShape {
            train_per_task: 8,
            test_per_task: 4,
            seed: 5,
        };
        assert_eq!(generate(&shape), generate(&shape));
        assert_ne!(
            generate(&shape).examples,
            generate(&CorpusShape { seed: 6, ..shape }).examples
        );
    }

    #[test]
    fn corpus_renders_and_hides_one_topic() {
        let corpus = generate(&CorpusShape {
            train_per_task: 8,
            test_per_task: 4,
            seed: 1,
        });
        let set = TaskSet::from_raw(corpus.specs, corpus.examples, 1).unwrap();
        assert_eq!(set.clusters().len(), 4);
        let lm = TopicLm::new(corpus.mock_table).unwrap();
        for task in set.tasks.values() {
            assert_eq!(task.examples.len(), 12);
            for e in &task.examples {
                assert!(!e.input_text.contains("OPTIONS"));
                let ws = words(&e.input_text);
                let hits = TOPICS
                    .iter()
                    .filter(|(_, _, m)| m.iter().any(|w| ws.iter().any(|x| x == w)))
                    .count();
                assert_eq!(hits, 1, "{}", e.input_text);
                // no label word leaks into the input
                assert!(labels().iter().all(|l| !ws.contains(l)), "{}", e.input_text);
                assert_eq!(lm.shared_topics(&e.input_text).len(), 0);
            }
        }
    }

    #[test]
    fn same_topic_demonstration_answers_correctly() {
        let lm = mock_lm(0);
        let ctx = "recipe with soup cooking\nthe oven story about";
        let out = lm
            .greedy_complete(&crate::lmclient::CompletionRequest::new(ctx, 4))
            .unwrap();
        assert_eq!(out, "cooking");
        assert_eq!(lm.predict_choice(ctx, &labels()).unwrap(), 1);
    }
}

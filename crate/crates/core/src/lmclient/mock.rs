//! Offline language models.
//!
//! [`TopicLm`] is a table-driven model over a closed vocabulary. Each topic
//! in its [`MockTable`] owns a set of member words and one label word. The
//! context is split on `\n`: the last line is the query, earlier lines are
//! demonstrations. A topic is *shared* when its member words occur both in
//! the query and in at least one demonstration.
//!
//! Rules:
//! - greedy completion: the label of the lowest shared topic; with no shared
//!   topic, a hashed label followed by a hashed filler word;
//! - token log-probability: a hashed base value in `[base_low, base_high)`
//!   keyed by (seed, context, position, token), plus `boost` when the token is
//!   the label of a shared topic, capped at 0.
//!
//! Every output is a pure function of the request and the table.

use std::collections::BTreeSet;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LanguageModel, LmError, TokenLogLikelihood};
use crate::text::words;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTopic {
    pub name: String,
    pub label: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    pub topics: Vec<MockTopic>,
    pub fillers: Vec<String>,
    pub boost: f64,
    pub base_low: f64,
    pub base_high: f64,
    pub seed: u64,
}

impl MockTable {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.topics.is_empty() || self.fillers.is_empty() {
            return Err(LmError::InvalidRequest(
                "mock table needs topics and fillers".into(),
            ));
        }
        if !(self.base_low < self.base_high && self.base_high <= 0.0 && self.boost >= 0.0) {
            return Err(LmError::InvalidRequest(
                "mock table needs base_low < base_high <= 0 and boost >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TopicLm {
    table: MockTable,
}

impl TopicLm {
    pub fn new(table: MockTable) -> Result<Self, LmError> {
        table.validate()?;
        Ok(Self { table })
    }

    pub fn table(&self) -> &MockTable {
        &self.table
    }

    fn topics_in(&self, line: &str) -> BTreeSet<usize> {
        let ws: BTreeSet<String> = words(line).into_iter().collect();
        self.table
            .topics
            .iter()
            .enumerate()
            .filter(|(_, t)| t.members.iter().any(|m| ws.contains(m)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Topics present in the query line and in at least one earlier line.
    pub fn shared_topics(&self, context: &str) -> BTreeSet<usize> {
        let lines: Vec<&str> = context.split('\n').collect();
        let (query, demos) = lines.split_last().expect("split yields at least one line");
        let in_query = self.topics_in(query);
        if in_query.is_empty() {
            return in_query;
        }
        let in_demos: BTreeSet<usize> = demos.iter().flat_map(|d| self.topics_in(d)).collect();
        in_query.intersection(&in_demos).copied().collect()
    }

    fn hash(&self, parts: &[&[u8]]) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(self.table.seed);
        for p in parts {
            h.write_u64(p.len() as u64);
            h.write(p);
        }
        splitmix(h.finish())
    }

    fn unit(&self, parts: &[&[u8]]) -> f64 {
        (self.hash(parts) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Log-probability of `token` at `position` of an option.
    pub fn token_logprob(
        &self,
        context: &str,
        shared: &BTreeSet<usize>,
        position: usize,
        token: &str,
    ) -> f64 {
        let t = &self.table;
        let u = self.unit(&[
            b"lp",
            context.as_bytes(),
            &(position as u64).to_le_bytes(),
            token.as_bytes(),
        ]);
        let mut lp = t.base_low + (t.base_high - t.base_low) * u;
        if shared.iter().any(|&i| t.topics[i].label == token) {
            lp += t.boost;
        }
        lp.min(0.0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl LanguageModel for TopicLm {
    fn identity(&self) -> String {
        format!(
            "topic-mock(seed={}, topics={})",
            self.table.seed,
            self.table.topics.len()
        )
    }

    fn greedy_complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        req.validate()?;
        let t = &self.table;
        let shared = self.shared_topics(&req.context);
        let answer: Vec<&str> = match shared.first() {
            Some(&i) => vec![t.topics[i].label.as_str()],
            None => {
                let h = self.hash(&[b"gen", req.context.as_bytes()]);
                let label = &t.topics[(h % t.topics.len() as u64) as usize].label;
                let filler = &t.fillers[((h >> 32) % t.fillers.len() as u64) as usize];
                vec![label.as_str(), filler.as_str()]
            }
        };
        Ok(answer
            .into_iter()
            .take(req.max_new_tokens)
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn loglikelihoods(
        &self,
        context: &str,
        options: &[String],
    ) -> Result<Vec<TokenLogLikelihood>, LmError> {
        if context.is_empty() {
            return Err(LmError::InvalidRequest("empty context".into()));
        }
        let shared = self.shared_topics(context);
        options
            .iter()
            .map(|opt| {
                let toks = words(opt);
                if toks.is_empty() {
                    return Err(LmError::InvalidRequest(format!(
                        "option {opt:?} has no tokens"
                    )));
                }
                let sum_logprob = toks
                    .iter()
                    .enumerate()
                    .map(|(pos, tok)| self.token_logprob(context, &shared, pos, tok))
                    .sum();
                Ok(TokenLogLikelihood {
                    sum_logprob,
                    token_count: toks.len(),
                })
            })
            .collect()
    }
}

type CompleteFn = dyn Fn(&str) -> String + Send + Sync;
type TokenLogprobFn = dyn Fn(&str, &str) -> Vec<f64> + Send + Sync;

/// Test double driven by two closures: one maps a context to its completion,
/// the other maps (context, option) to the option's per-token log-probabilities.
pub struct ScriptedLm {
    name: String,
    complete: Box<CompleteFn>,
    token_logprobs: Box<TokenLogprobFn>,
}

impl ScriptedLm {
    pub fn new(
        name: impl Into<String>,
        complete: impl Fn(&str) -> String + Send + Sync + 'static,
        token_logprobs: impl Fn(&str, &str) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            complete: Box::new(complete),
            token_logprobs: Box::new(token_logprobs),
        }
    }
}

impl LanguageModel for ScriptedLm {
    fn identity(&self) -> String {
        format!("scripted({})", self.name)
    }

    fn greedy_complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        req.validate()?;
        let full = (self.complete)(&req.context);
        Ok(full
            .split_whitespace()
            .take(req.max_new_tokens)
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn loglikelihoods(
        &self,
        context: &str,
        options: &[String],
    ) -> Result<Vec<TokenLogLikelihood>, LmError> {
        Ok(options
            .iter()
            .map(|o| {
                let lps = (self.token_logprobs)(context, o);
                TokenLogLikelihood {
                    sum_logprob: lps.iter().sum(),
                    token_count: lps.len(),
                }
            })
            .collect())
    }
}

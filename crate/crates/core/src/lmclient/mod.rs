//! Language-model contract used for prompt scoring and inference.
//!
//! Implementations answer two questions: a greedy continuation of a context,
//! and the summed log-probability of each candidate option given a context.
//! Per-token likelihoods and choice prediction are derived from the latter
//! in the same way for every backend.

mod mock;
mod remote;

pub use mock::{MockTable, MockTopic, ScriptedLm, TopicLm};
pub use remote::{RemoteConfig, RemoteLm, AUTH_TOKEN_ENV};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    /// Transport failure or overload; the request may succeed if repeated.
    #[error("language model unavailable after {attempts} attempt(s): {message}")]
    Retryable { attempts: u32, message: String },
    /// The backend answered with something that does not fit the protocol.
    #[error("language model protocol error: {0}")]
    Protocol(String),
    #[error("invalid language model request: {0}")]
    InvalidRequest(String),
}

/// Greedy generation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub context: String,
    pub max_new_tokens: usize,
}

impl CompletionRequest {
    pub fn new(context: impl Into<String>, max_new_tokens: usize) -> Self {
        Self {
            context: context.into(),
            max_new_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.context.is_empty() {
            return Err(LmError::InvalidRequest("empty context".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(LmError::InvalidRequest(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Summed log-probability of an option's tokens, as returned by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogLikelihood {
    pub sum_logprob: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionScore {
    pub option_index: usize,
    /// Geometric mean of the option's token probabilities, in (0, 1].
    pub per_token_likelihood: f64,
    pub token_count: usize,
}

impl OptionScore {
    pub fn from_loglikelihood(
        option_index: usize,
        ll: TokenLogLikelihood,
    ) -> Result<Self, LmError> {
        if ll.token_count == 0 {
            return Err(LmError::Protocol(format!(
                "option {option_index} scored with zero tokens"
            )));
        }
        if !ll.sum_logprob.is_finite() || ll.sum_logprob > 0.0 {
            return Err(LmError::Protocol(format!(
                "option {option_index} has invalid log-probability {}",
                ll.sum_logprob
            )));
        }
        let mean = ll.sum_logprob / ll.token_count as f64;
        // exp underflows to 0 below about -745; keep the likelihood strictly positive
        let per_token_likelihood = mean.exp().clamp(f64::MIN_POSITIVE, 1.0);
        Ok(OptionScore {
            option_index,
            per_token_likelihood,
            token_count: ll.token_count,
        })
    }
}

pub trait LanguageModel: Send + Sync {
    /// Human-readable identity recorded in reports.
    fn identity(&self) -> String;

    fn greedy_complete(&self, req: &CompletionRequest) -> Result<String, LmError>;

    /// Summed log-probability and token count of each option as a continuation of `context`.
    fn loglikelihoods(
        &self,
        context: &str,
        options: &[String],
    ) -> Result<Vec<TokenLogLikelihood>, LmError>;

    fn option_likelihoods(
        &self,
        context: &str,
        options: &[String],
    ) -> Result<Vec<OptionScore>, LmError> {
        validate_options(options)?;
        let lls = self.loglikelihoods(context, options)?;
        if lls.len() != options.len() {
            return Err(LmError::Protocol(format!(
                "expected {} option results, got {}",
                options.len(),
                lls.len()
            )));
        }
        lls.into_iter()
            .enumerate()
            .map(|(i, ll)| OptionScore::from_loglikelihood(i, ll))
            .collect()
    }

    /// Index of the most likely option; ties go to the lowest index.
    fn predict_choice(&self, context: &str, options: &[String]) -> Result<usize, LmError> {
        let scores = self.option_likelihoods(context, options)?;
        Ok(argmax_likelihood(&scores))
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn greedy_complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        (**self).greedy_complete(req)
    }
    fn loglikelihoods(
        &self,
        context: &str,
        options: &[String],
    ) -> Result<Vec<TokenLogLikelihood>, LmError> {
        (**self).loglikelihoods(context, options)
    }
}

fn validate_options(options: &[String]) -> Result<(), LmError> {
    if options.is_empty() {
        return Err(LmError::InvalidRequest("no options to score".into()));
    }
    if let Some(i) = options.iter().position(|o| o.trim().is_empty()) {
        return Err(LmError::InvalidRequest(format!("option {i} is empty")));
    }
    Ok(())
}

/// Argmax over per-token likelihood, lowest index on ties.
pub fn argmax_likelihood(scores: &[OptionScore]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.per_token_likelihood > scores[best].per_token_likelihood {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn score(i: usize, p: f64) -> OptionScore {
        OptionScore {
            option_index: i,
            per_token_likelihood: p,
            token_count: 1,
        }
    }

    #[test]
    fn geometric_mean_of_equal_probabilities() {
        let s = OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: 3.0 * 0.5f64.ln(),
                token_count: 3,
            },
        )
        .unwrap();
        assert!((s.per_token_likelihood - 0.5).abs() < 1e-15);
        let p = 0.37f64;
        let s = OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: p.ln(),
                token_count: 1,
            },
        )
        .unwrap();
        assert!((s.per_token_likelihood - p).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_loglikelihoods() {
        assert!(OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: -1.0,
                token_count: 0
            }
        )
        .is_err());
        assert!(OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: 0.5,
                token_count: 1
            }
        )
        .is_err());
        assert!(OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: f64::NAN,
                token_count: 1
            }
        )
        .is_err());
        let tiny = OptionScore::from_loglikelihood(
            0,
            TokenLogLikelihood {
                sum_logprob: -1e6,
                token_count: 1,
            },
        )
        .unwrap();
        assert!(tiny.per_token_likelihood > 0.0);
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(argmax_likelihood(&[score(0, 0.2), score(1, 0.6)]), 1);
        assert_eq!(argmax_likelihood(&[score(0, 0.4), score(1, 0.4)]), 0);
    }

    #[test]
    fn argmax_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let m = rng.random_range(2..7);
            // coarse grid so ties happen
            let ps: Vec<f64> = (0..m)
                .map(|_| rng.random_range(1..5) as f64 / 4.0)
                .collect();
            let scores: Vec<_> = ps.iter().enumerate().map(|(i, &p)| score(i, p)).collect();
            let max = ps.iter().cloned().fold(f64::MIN, f64::max);
            let oracle = ps.iter().position(|&p| p == max).unwrap();
            assert_eq!(argmax_likelihood(&scores), oracle);
        }
    }

    #[test]
    fn request_validation() {
        assert!(CompletionRequest::new("", 4).validate().is_err());
        assert!(CompletionRequest::new("x", 0).validate().is_err());
        assert!(CompletionRequest::new("x", 1).validate().is_ok());
    }
}

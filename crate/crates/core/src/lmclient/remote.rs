//! HTTP client for an external inference server.
//!
//! Endpoints (JSON bodies):
//! - `POST {base}/complete`: `{context, max_new_tokens}` -> `{text}`
//! - `POST {base}/loglikelihood`: `{context, options}` -> `{results: [{sum_logprob, token_count}]}`

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LanguageModel, LmError, TokenLogLikelihood};

/// Environment variable holding the bearer token for the inference server.
pub const AUTH_TOKEN_ENV: &str = "UPRISE_LM_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub auth_token: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_connections: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
            max_connections: 8,
        }
    }
}

#[derive(Serialize)]
struct LoglikelihoodBody<'a> {
    context: &'a str,
    options: &'a [String],
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

#[derive(Deserialize)]
struct LoglikelihoodResponse {
    results: Vec<TokenLogLikelihood>,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteLm {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

enum Failure {
    Retry(String),
    Fatal(LmError),
}

impl RemoteLm {
    pub fn new(cfg: RemoteConfig) -> Result<Self, LmError> {
        if cfg.max_attempts == 0 || cfg.max_connections == 0 {
            return Err(LmError::InvalidRequest(
                "max_attempts and max_connections must be at least 1".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        let slots = Semaphore {
            free: Mutex::new(cfg.max_connections),
            cv: Condvar::new(),
        };
        Ok(Self { cfg, agent, slots })
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        endpoint: &str,
        body: &B,
    ) -> Result<R, LmError> {
        let url = format!("{}/{endpoint}", self.cfg.base_url);
        let mut backoff = self.cfg.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            match self.post_once(&url, body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => {
                    log::warn!("{url}: attempt {attempt} failed: {msg}");
                    last = msg;
                    if attempt < self.cfg.max_attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(LmError::Retryable {
            attempts: self.cfg.max_attempts,
            message: last,
        })
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
    ) -> Result<R, Failure> {
        let _slot = self.slots.acquire();
        let mut req = self.agent.post(url);
        if let Some(token) = &self.cfg.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                Failure::Retry(format!("server answered {code}"))
            }
            ureq::Error::StatusCode(code) => {
                Failure::Fatal(LmError::Protocol(format!("server answered {code}")))
            }
            other => Failure::Retry(other.to_string()),
        })?;
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| Failure::Fatal(LmError::Protocol(format!("malformed response: {e}"))))
    }
}

impl LanguageModel for RemoteLm {
    fn identity(&self) -> String {
        format!("remote({})", self.cfg.base_url)
    }

    fn greedy_complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        req.validate()?;
        let resp: CompleteResponse = self.post("complete", req)?;
        Ok(resp
            .text
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
        let resp: LoglikelihoodResponse =
            self.post("loglikelihood", &LoglikelihoodBody { context, options })?;
        Ok(resp.results)
    }
}

//! Client for an OpenAI-style `/completions` endpoint.
//!
//! Label scores are the log-probabilities of each candidate token at the
//! next position. The client first asks for the top log-probs of one
//! generated token; candidates missing from that list are scored by echoing
//! `prompt + candidate` and reading the log-prob of the final token.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, LabelScores};
use crate::corpus::RenderedPrompt;

pub const API_KEY_ENV: &str = "ICLSEL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_top")]
    pub top_logprobs: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_window: Option<usize>,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_top() -> usize {
    5
}
fn default_attempts() -> usize {
    5
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            top_logprobs: default_top(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
            timeout_secs: default_timeout(),
            context_window: None,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: usize,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> crate::Result<Self> {
        if config.max_attempts == 0 {
            return Err(crate::Error::Config("max_attempts must be >= 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(Self {
            config,
            agent,
            api_key,
        })
    }

    fn post_once(&self, body: &Value) -> Result<Completion, BackendError> {
        let url = format!("{}/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::Invalid(format!("unparseable completion: {e}"))),
            429 | 500..=599 => Err(BackendError::Transport(format!("http {status}: {text}"))),
            _ if text.contains("context") => Err(BackendError::ContextOverflow {
                tokens: 0,
                limit: self.config.context_window.unwrap_or(0),
            }),
            _ => Err(BackendError::Invalid(format!("http {status}: {text}"))),
        }
    }

    /// Bounded exponential backoff over retryable failures.
    fn post(&self, body: &Value) -> Result<Completion, BackendError> {
        let mut delay = self.config.backoff_ms;
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.post_once(body) {
                Ok(c) => return Ok(c),
                Err(e) if e.is_retryable() => {
                    log::warn!("attempt {attempt}/{}: {e}", self.config.max_attempts);
                    last = e.to_string();
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(Duration::from_millis(delay));
                        delay = delay.saturating_mul(2);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted {
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    fn check_window(&self, c: &Completion) -> Result<(), BackendError> {
        if let (Some(limit), Some(u)) = (self.config.context_window, &c.usage) {
            if u.prompt_tokens + 1 > limit {
                return Err(BackendError::ContextOverflow {
                    tokens: u.prompt_tokens + 1,
                    limit,
                });
            }
        }
        Ok(())
    }

    fn echo(&self, text: &str) -> Result<(Logprobs, Completion), BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0,
        });
        let mut c = self.post(&body)?;
        let lp = c
            .choices
            .first_mut()
            .and_then(|ch| ch.logprobs.take())
            .ok_or_else(|| BackendError::Invalid("echo response lacks logprobs".into()))?;
        Ok((lp, c))
    }
}

impl Backend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": rendered.text,
            "max_tokens": 1,
            "logprobs": self.config.top_logprobs,
            "temperature": 0,
        });
        let c = self.post(&body)?;
        self.check_window(&c)?;
        let top = c
            .choices
            .first()
            .and_then(|ch| ch.logprobs.as_ref())
            .and_then(|lp| lp.top_logprobs.first().cloned().flatten())
            .unwrap_or_default();
        let mut scores = Vec::with_capacity(rendered.label_candidates.len());
        for cand in &rendered.label_candidates {
            if let Some(lp) = top.get(cand) {
                scores.push(*lp);
                continue;
            }
            let (lp, _) = self.echo(&format!("{}{cand}", rendered.text))?;
            match (lp.tokens.last(), lp.token_logprobs.last()) {
                (Some(tok), Some(Some(v))) if tok == cand => scores.push(*v),
                _ => {
                    return Err(BackendError::Invalid(format!(
                        "candidate {cand:?} is not a single trailing token"
                    )))
                }
            }
        }
        LabelScores::new(scores)
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        Ok(self.echo(text)?.0.tokens.len())
    }

    /// Log-probs of every token after the first (the first has no context).
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let (lp, _) = self.echo(text)?;
        let v: Vec<f64> = lp.token_logprobs.into_iter().flatten().collect();
        if v.is_empty() {
            return Err(BackendError::Unsupported(
                "perplexity of a text with fewer than two tokens".into(),
            ));
        }
        Ok(v)
    }

    fn context_window(&self) -> Option<usize> {
        self.config.context_window
    }
}

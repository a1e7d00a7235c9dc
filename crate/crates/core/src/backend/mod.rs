//! Language-model backends.
//!
//! A backend maps a rendered prompt to one score per label candidate. Three
//! implementations share the [`Backend`] trait: an HTTP completion client, a
//! replay store that serves recorded scores, and a synthetic oracle whose
//! margins are an explicit linear function of the prompt.

mod remote;
mod replay;
mod synthetic;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteConfig};
pub use replay::{request_hash, RecordingBackend, ReplayBackend, ReplayStore, RequestKind};
pub use synthetic::{PatternOverride, SyntheticBackend, SyntheticOracleSpec};

use crate::corpus::RenderedPrompt;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("context overflow: prompt has {tokens} tokens, window is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("transport error (retryable): {0}")]
    Transport(String),
    #[error("remote request failed after {attempts} attempts: {message}")]
    Exhausted { attempts: usize, message: String },
    #[error("replay cache miss for request {0}")]
    CacheMiss(String),
    #[error("backend does not support {0}")]
    Unsupported(String),
    #[error("invalid backend request: {0}")]
    Invalid(String),
    #[error("replay store io: {0}")]
    Store(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// One score per label candidate at the answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelScores(pub Vec<f64>);

impl LabelScores {
    pub fn new(scores: Vec<f64>) -> Result<Self, BackendError> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(BackendError::Invalid(format!(
                "label scores must be finite and non-empty: {scores:?}"
            )));
        }
        Ok(Self(scores))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Argmax with ties going to the lower class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.0.iter().enumerate().skip(1) {
            if *s > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Softmax over the scores.
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.0.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

/// Margin of the correct class: `scores[gold]` minus the best incorrect
/// score. Positive iff the prediction is correct; a tie gives 0, which counts
/// as incorrect. With a single class there is no competitor and the margin is
/// `+inf`.
pub fn outcome(scores: &LabelScores, gold: usize) -> f64 {
    assert!(gold < scores.len(), "gold class {gold} out of range");
    let best_other = scores
        .0
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gold)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores.0[gold] - best_other
}

pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64, BackendError> {
    if logprobs.is_empty() {
        return Err(BackendError::Invalid("perplexity of empty text".into()));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

pub trait Backend: Send + Sync {
    /// Identifier mixed into replay request hashes.
    fn model_id(&self) -> &str;

    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError>;

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError>;

    /// Per-token log-probabilities of `text`.
    fn token_logprobs(&self, _text: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported("token-level log-probabilities".into()))
    }

    fn context_window(&self) -> Option<usize> {
        None
    }

    /// `exp(-mean log p)` over the tokens of `text`.
    fn perplexity(&self, text: &str) -> Result<f64, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Invalid("perplexity of empty text".into()));
        }
        perplexity_from_logprobs(&self.token_logprobs(text)?)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError> {
        (**self).score_labels(rendered)
    }
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        (**self).count_tokens(text)
    }
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).token_logprobs(text)
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
    fn perplexity(&self, text: &str) -> Result<f64, BackendError> {
        (**self).perplexity(text)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError> {
        (**self).score_labels(rendered)
    }
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        (**self).count_tokens(text)
    }
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).token_logprobs(text)
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
    fn perplexity(&self, text: &str) -> Result<f64, BackendError> {
        (**self).perplexity(text)
    }
}

/// Counts calls that reach the wrapped backend.
pub struct Metered<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B: Backend> Metered<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for Metered<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_labels(rendered)
    }
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.count_tokens(text)
    }
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.token_logprobs(text)
    }
    fn context_window(&self) -> Option<usize> {
        self.inner.context_window()
    }
}

/// Which backend to construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendDescriptor {
    Remote {
        #[serde(flatten)]
        config: RemoteConfig,
        /// Record every response into this replay store.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record: Option<PathBuf>,
    },
    Replay {
        path: PathBuf,
        model: String,
    },
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<Box<SyntheticOracleSpec>>,
    },
}

impl BackendDescriptor {
    pub fn build(&self) -> crate::Result<Box<dyn Backend>> {
        Ok(match self {
            BackendDescriptor::Remote { config, record } => {
                let remote = RemoteBackend::new(config.clone())?;
                match record {
                    Some(path) => Box::new(RecordingBackend::new(remote, ReplayStore::open(path)?)),
                    None => Box::new(remote),
                }
            }
            BackendDescriptor::Replay { path, model } => {
                Box::new(ReplayBackend::new(ReplayStore::open(path)?, model.clone()))
            }
            BackendDescriptor::Synthetic { spec_path, spec } => {
                let spec = match (spec, spec_path) {
                    (Some(s), None) => (**s).clone(),
                    (None, Some(p)) => SyntheticOracleSpec::from_file(p)?,
                    _ => {
                        return Err(crate::Error::Config(
                            "synthetic backend needs exactly one of spec, spec_path".into(),
                        ))
                    }
                };
                Box::new(SyntheticBackend::new(spec))
            }
        })
    }

    /// Short identity string for manifests.
    pub fn identity(&self) -> String {
        match self {
            BackendDescriptor::Remote { config, .. } => {
                format!("remote:{}@{}", config.model, config.endpoint)
            }
            BackendDescriptor::Replay { model, path } => {
                format!("replay:{model}@{}", path.display())
            }
            BackendDescriptor::Synthetic { .. } => "synthetic".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn outcome_examples() {
        let s = LabelScores::new(vec![-1.2, -2.0]).unwrap();
        assert!((outcome(&s, 0) - 0.8).abs() < 1e-12);
        let s = LabelScores::new(vec![-0.5, -0.5, -0.5]).unwrap();
        assert_eq!(outcome(&s, 1), 0.0);
        let s = LabelScores::new(vec![-3.0, -1.0, -2.0]).unwrap();
        assert_eq!(outcome(&s, 2), -1.0);
    }

    #[test]
    fn perplexity_analytic() {
        let ln2 = std::f64::consts::LN_2;
        assert!((perplexity_from_logprobs(&[-ln2; 5]).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity_from_logprobs(&[-3.0]).unwrap() - 20.085_536_923_187_668).abs() < 1e-9);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(LabelScores::new(vec![0.0, f64::NAN]).is_err());
        assert!(LabelScores::new(vec![]).is_err());
    }

    #[test]
    fn descriptor_roundtrip() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"kind":"replay","path":"a.jsonl","model":"gptj"}"#).unwrap();
        assert_eq!(d.identity(), "replay:gptj@a.jsonl");
        let r: BackendDescriptor = serde_json::from_str(
            r#"{"kind":"remote","endpoint":"http://x/v1","model":"m","record":"r.jsonl"}"#,
        )
        .unwrap();
        assert!(matches!(r, BackendDescriptor::Remote { record: Some(_), .. }));
    }

    proptest! {
        #[test]
        fn argmax_agrees_with_margin_sign(scores in proptest::collection::vec(-10.0f64..10.0, 2..6), g in 0usize..6) {
            let gold = g % scores.len();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let s = LabelScores::new(scores).unwrap();
            prop_assert_eq!(s.argmax() == gold, outcome(&s, gold) > 0.0);
        }

        #[test]
        fn margin_invariant_to_constant_shift(scores in proptest::collection::vec(-10.0f64..10.0, 2..6), shift in -50.0f64..50.0, g in 0usize..6) {
            let gold = g % scores.len();
            let a = LabelScores::new(scores.clone()).unwrap();
            let b = LabelScores::new(scores.iter().map(|s| s + shift).collect()).unwrap();
            prop_assert!((outcome(&a, gold) - outcome(&b, gold)).abs() <= 1e-9 * (1.0 + shift.abs()));
            prop_assert_eq!(a.argmax(), b.argmax());
        }
    }
}

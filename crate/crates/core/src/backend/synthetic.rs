use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, LabelScores};
use crate::corpus::{QueryRef, RenderedPrompt};
use crate::stats::{hash_str, hash_words};

/// Multiplies the weight sum and shifts the bias for prompts whose label
/// pattern matches exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternOverride {
    pub pattern: Vec<usize>,
    #[serde(default = "one")]
    pub weight_scale: f64,
    #[serde(default)]
    pub bias_shift: f64,
}

fn one() -> f64 {
    1.0
}

fn default_vocab() -> usize {
    50_000
}

/// Parameters of the synthetic oracle.
///
/// For a prompt `z_1..z_K` and a query `q`, the margin is
///
/// ```text
/// m = scale(p) * sum_j w[id(z_j), j] + b + shift(p) + offset(q) + noise(prompt, q)
/// ```
///
/// where `p` is the prompt's label pattern (overrides default to scale 1,
/// shift 0), `offset(q)` is a hashed Gaussian of the query identity times
/// `query_offset_scale` plus `dataset_shift[q.dataset]`, and the noise is a
/// hashed Gaussian with standard deviation `noise_std`. Scores are `m` for
/// the gold class and 0 elsewhere, plus `label_bias`, so the outcome of an
/// unbiased oracle is exactly `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticOracleSpec {
    pub n_train: usize,
    pub k: usize,
    /// Row-major `n_train x k`.
    pub true_weights: Vec<f64>,
    #[serde(default)]
    pub true_bias: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub query_offset_scale: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dataset_shift: BTreeMap<String, f64>,
    /// Added to every class score, including content-free probes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pattern_overrides: Vec<PatternOverride>,
    /// Labels of the training examples; required by `pattern_overrides`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_labels: Vec<usize>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Spread of per-token log-probabilities around `-ln(vocab_size)`.
    #[serde(default)]
    pub logprob_jitter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_window: Option<usize>,
}

impl SyntheticOracleSpec {
    pub fn constant(n_train: usize, k: usize, bias: f64) -> Self {
        Self {
            n_train,
            k,
            true_weights: vec![0.0; n_train * k],
            true_bias: bias,
            noise_std: 0.0,
            seed: 0,
            query_offset_scale: 0.0,
            dataset_shift: BTreeMap::new(),
            label_bias: Vec::new(),
            pattern_overrides: Vec::new(),
            train_labels: Vec::new(),
            vocab_size: default_vocab(),
            logprob_jitter: 0.0,
            context_window: None,
        }
    }

    /// Weights drawn i.i.d. from `N(0, weight_scale^2)`.
    pub fn random(n_train: usize, k: usize, weight_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::constant(n_train, k, 0.0);
        for w in &mut spec.true_weights {
            let z: f64 = rng.sample(StandardNormal);
            *w = weight_scale * z;
        }
        spec.seed = seed;
        spec
    }

    pub fn from_file(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.true_weights.len() != self.n_train * self.k {
            return Err(crate::Error::Config(format!(
                "oracle weights have {} entries, expected {} x {}",
                self.true_weights.len(),
                self.n_train,
                self.k
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(crate::Error::Config("noise_std must be >= 0".into()));
        }
        if !self.pattern_overrides.is_empty() && self.train_labels.len() != self.n_train {
            return Err(crate::Error::Config(
                "pattern_overrides need train_labels for every example".into(),
            ));
        }
        Ok(())
    }

    pub fn weight(&self, id: usize, pos: usize) -> f64 {
        self.true_weights[id * self.k + pos]
    }

    /// Deterministic offset for one query identity.
    pub fn query_offset(&self, q: &QueryRef) -> f64 {
        let mut off = self.dataset_shift.get(&q.dataset).copied().unwrap_or(0.0);
        if self.query_offset_scale != 0.0 {
            let h = hash_words(
                self.seed ^ 0x51_7cc1_b727_220a,
                [hash_str(&q.dataset), hash_str(&q.split.to_string()), q.id as u64],
            );
            let z: f64 = ChaCha8Rng::seed_from_u64(h).sample(StandardNormal);
            off += self.query_offset_scale * z;
        }
        off
    }

    fn noise(&self, context: &[usize], q: &QueryRef) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        let words = context
            .iter()
            .map(|&i| i as u64)
            .chain([u64::MAX, hash_str(&q.dataset), hash_str(&q.split.to_string()), q.id as u64]);
        let z: f64 = ChaCha8Rng::seed_from_u64(hash_words(self.seed, words)).sample(StandardNormal);
        self.noise_std * z
    }

    /// Noise-free margin for a prompt, without query offset.
    pub fn linear_margin(&self, context: &[usize]) -> Result<f64, BackendError> {
        if context.len() > self.k {
            return Err(BackendError::Invalid(format!(
                "prompt has {} examples, oracle models {} positions",
                context.len(),
                self.k
            )));
        }
        let mut sum = 0.0;
        for (pos, &id) in context.iter().enumerate() {
            if id >= self.n_train {
                return Err(BackendError::Invalid(format!(
                    "example {id} outside oracle range {}",
                    self.n_train
                )));
            }
            sum += self.weight(id, pos);
        }
        let (scale, shift) = if self.pattern_overrides.is_empty() {
            (1.0, 0.0)
        } else {
            let pattern: Vec<usize> = context.iter().map(|&i| self.train_labels[i]).collect();
            self.pattern_overrides
                .iter()
                .find(|o| o.pattern == pattern)
                .map_or((1.0, 0.0), |o| (o.weight_scale, o.bias_shift))
        };
        Ok(scale * sum + self.true_bias + shift)
    }

    /// Full margin for a prompt answering query `q`.
    pub fn margin(&self, context: &[usize], q: &QueryRef) -> Result<f64, BackendError> {
        Ok(self.linear_margin(context)? + self.query_offset(q) + self.noise(context, q))
    }

    fn token_logprob(&self, token: &str) -> f64 {
        let base = -(self.vocab_size as f64).ln();
        if self.logprob_jitter == 0.0 {
            return base;
        }
        let u = (hash_str(token) >> 11) as f64 / (1u64 << 53) as f64;
        base - self.logprob_jitter * u
    }
}

pub struct SyntheticBackend {
    spec: SyntheticOracleSpec,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticOracleSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SyntheticOracleSpec {
        &self.spec
    }
}

fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

impl Backend for SyntheticBackend {
    fn model_id(&self) -> &str {
        "synthetic-oracle"
    }

    fn score_labels(&self, rendered: &RenderedPrompt) -> Result<LabelScores, BackendError> {
        if let Some(limit) = self.spec.context_window {
            let tokens = self.count_tokens(&rendered.text)? + 1;
            if tokens > limit {
                return Err(BackendError::ContextOverflow { tokens, limit });
            }
        }
        let c = rendered.label_candidates.len();
        let mut scores = vec![0.0; c];
        if let Some(q) = &rendered.query {
            if q.label >= c {
                return Err(BackendError::Invalid(format!("gold label {} >= {c}", q.label)));
            }
            scores[q.label] = self.spec.margin(&rendered.context, q)?;
        }
        if !self.spec.label_bias.is_empty() {
            if self.spec.label_bias.len() != c {
                return Err(BackendError::Invalid("label_bias length differs from C".into()));
            }
            for (s, b) in scores.iter_mut().zip(&self.spec.label_bias) {
                *s += b;
            }
        }
        LabelScores::new(scores)
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        Ok(whitespace_tokens(text).count())
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(whitespace_tokens(text).map(|t| self.spec.token_logprob(t)).collect())
    }

    fn context_window(&self) -> Option<usize> {
        self.spec.context_window
    }
}

//! Linear datamodels: per-dev-example ridge regressions from
//! (example id, position) indicators to the model's margin.
//!
//! A suite holds one shared (phase 1) model per dev example plus, per label
//! pattern, a set refit on that pattern's prompts with the phase-1 weights as
//! the ridge prior.

mod embed;
mod eval;
mod fit;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::ExampleId;
use crate::pool::Prompt;

pub use embed::{export_embeddings, save_embeddings, Embeddings};
pub use eval::{datamodels_scores, heldout_eval, Aggregation, HeldoutReport, Routing, ScoreOptions, ScoreSets};
pub use fit::{fit_phase1, fit_suite};

pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_BUCKET_THRESHOLD: usize = 50;

pub type LabelPattern = Vec<usize>;

pub(crate) fn pattern_key(pattern: &[usize]) -> String {
    pattern.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

/// Flat feature indices `id * K + position`, one per prompt position.
pub fn encode_features(prompt: &Prompt, k: usize) -> Vec<usize> {
    debug_assert_eq!(prompt.k(), k);
    prompt
        .example_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| id * k + j)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datamodel {
    pub n_train: usize,
    pub k: usize,
    /// Row-major `n_train x k`.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dev_id: usize,
    /// `None` for the shared phase-1 model.
    pub bucket: Option<LabelPattern>,
}

impl Datamodel {
    pub fn zeros(n_train: usize, k: usize, dev_id: usize) -> Self {
        Self {
            n_train,
            k,
            weights: vec![0.0; n_train * k],
            bias: 0.0,
            dev_id,
            bucket: None,
        }
    }

    pub fn weight(&self, id: ExampleId, pos: usize) -> f64 {
        self.weights[id * self.k + pos]
    }

    pub fn predict_ids(&self, ids: &[ExampleId]) -> f64 {
        debug_assert_eq!(ids.len(), self.k);
        ids.iter()
            .enumerate()
            .map(|(j, &id)| self.weights[id * self.k + j])
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, prompt: &Prompt) -> f64 {
        self.predict_ids(&prompt.example_ids)
    }
}

/// Removes the per-position mean from each weight column. Weights are only
/// identified up to such shifts (absorbed by the bias), so recovery is
/// compared on centered weights.
pub fn gauge_centered(weights: &[f64], n_train: usize, k: usize) -> Vec<f64> {
    let mut out = weights.to_vec();
    for j in 0..k {
        let m = (0..n_train).map(|i| weights[i * k + j]).sum::<f64>() / n_train as f64;
        for i in 0..n_train {
            out[i * k + j] -= m;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub lambda: f64,
    pub bucket_threshold: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            bucket_threshold: DEFAULT_BUCKET_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub n_records: usize,
    /// `None` when the bucket fell under the threshold and uses phase 1.
    pub models: Option<Vec<Datamodel>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatamodelSuite {
    pub config: SuiteConfig,
    pub n_train: usize,
    pub k: usize,
    pub phase1: Vec<Datamodel>,
    pub phase2: BTreeMap<LabelPattern, Bucket>,
}

impl DatamodelSuite {
    pub fn dev_count(&self) -> usize {
        self.phase1.len()
    }

    /// The model that scores a prompt with this label pattern for `dev_id`.
    pub fn route(&self, pattern: &[usize], dev_id: usize) -> &Datamodel {
        match self.phase2.get(pattern).and_then(|b| b.models.as_ref()) {
            Some(models) => &models[dev_id],
            None => &self.phase1[dev_id],
        }
    }

    /// One model set per observed pattern (fallbacks resolve to phase 1),
    /// or just phase 1 when there is no second phase.
    pub fn model_sets(&self) -> Vec<&[Datamodel]> {
        if self.phase2.is_empty() {
            return vec![&self.phase1];
        }
        self.phase2
            .values()
            .map(|b| b.models.as_deref().unwrap_or(&self.phase1))
            .collect()
    }
}

pub use io::{load_suite, save_suite};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_one_per_position() {
        let p = Prompt {
            example_ids: vec![3, 9, 7],
            label_pattern: vec![0, 0, 0],
        };
        assert_eq!(encode_features(&p, 3), [9, 28, 23]);
        let q = Prompt {
            example_ids: vec![9, 3, 7],
            label_pattern: vec![0, 0, 0],
        };
        assert_ne!(encode_features(&p, 3), encode_features(&q, 3));
        let one = Prompt {
            example_ids: vec![5],
            label_pattern: vec![1],
        };
        assert_eq!(encode_features(&one, 1), [5]);
    }

    #[test]
    fn predict_sums_weights_and_bias() {
        let mut m = Datamodel::zeros(4, 2, 0);
        m.bias = 0.3;
        assert_eq!(m.predict_ids(&[1, 2]), 0.3);
        m.weights[2] = 1.0; // (1, 0)
        m.weights[5] = -2.0; // (2, 1)
        assert_eq!(m.predict_ids(&[1, 2]), -0.7);
        assert_eq!(m.predict_ids(&[2, 1]), 0.3);
    }

    #[test]
    fn centering_zeroes_column_means() {
        let w = vec![1.0, 5.0, 3.0, 7.0];
        let c = gauge_centered(&w, 2, 2);
        assert_eq!(c, [-1.0, -1.0, 1.0, 1.0]);
    }
}

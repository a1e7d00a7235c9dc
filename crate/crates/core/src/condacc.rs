//! Example scores from the prompt pool: conditional accuracy, its
//! Shapley-value form, one-shot accuracy, and cross-model agreement.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::corpus::{Dataset, ExampleId};
use crate::error::{Error, Result};
use crate::pool::{run_prompt, Prompt, PromptPool};
use crate::stats::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Condacc,
    Shapley,
    Datamodels,
    Oneshot,
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMethod::Condacc => "condacc",
            ScoreMethod::Shapley => "shapley",
            ScoreMethod::Datamodels => "datamodels",
            ScoreMethod::Oneshot => "oneshot",
        })
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "condacc" => ScoreMethod::Condacc,
            "shapley" => ScoreMethod::Shapley,
            "datamodels" => ScoreMethod::Datamodels,
            "oneshot" => ScoreMethod::Oneshot,
            _ => return Err(Error::Invalid(format!("unknown score method {s:?}"))),
        })
    }
}

/// One score per training example, indexed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub method: ScoreMethod,
    pub scores: Vec<f64>,
    /// Observations behind each score (records for CondAcc, dev examples for
    /// one-shot, fitted datamodels for Datamodels).
    pub support: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    id: ExampleId,
    method: ScoreMethod,
    score: f64,
    support: usize,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Example ids by descending score, ties by ascending id.
    pub fn ranking(&self) -> Vec<ExampleId> {
        let mut ids: Vec<ExampleId> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for (id, (&score, &support)) in self.scores.iter().zip(&self.support).enumerate() {
            let line = ScoreLine {
                id,
                method: self.method,
                score,
                support,
            };
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            lines.push(l);
        }
        let method = lines
            .first()
            .map(|l| l.method)
            .ok_or_else(|| Error::EmptySplit(format!("{} has no scores", path.display())))?;
        lines.sort_by_key(|l| l.id);
        if lines.iter().enumerate().any(|(i, l)| l.id != i || l.method != method) {
            return Err(Error::Invalid(format!(
                "{}: score ids must be 0..N with one method",
                path.display()
            )));
        }
        Ok(Self {
            method,
            scores: lines.iter().map(|l| l.score).collect(),
            support: lines.iter().map(|l| l.support).collect(),
        })
    }
}

/// Mean dev accuracy over the records whose prompt contains each example.
pub fn condacc_scores(pool: &PromptPool) -> Result<ScoreVector> {
    let n = pool.n_train();
    let mut sum = vec![0.0; n];
    let mut support = vec![0usize; n];
    for (id, occ) in pool.occurrence_index.iter().enumerate() {
        let records: BTreeSet<usize> = occ.iter().map(|o| o.0).collect();
        for r in records {
            sum[id] += pool.records[r].dev_accuracy;
            support[id] += 1;
        }
    }
    if let Some(id) = support.iter().position(|&s| s == 0) {
        return Err(Error::Pool(format!("example {id} never occurs in the pool")));
    }
    Ok(ScoreVector {
        method: ScoreMethod::Condacc,
        scores: sum.iter().zip(&support).map(|(s, c)| s / *c as f64).collect(),
        support,
    })
}

/// Shapley values for the K-subset valuation game, which are the affine map
/// `N/(N-K) * (s_ca - A)` of the CondAcc scores, `A` being the mean record
/// accuracy. (The published closed form carries a `+A` term; the derivation
/// it follows gives `-A`, which is what is implemented.)
pub fn shapley_scores(condacc: &ScoreVector, pool: &PromptPool) -> Result<ScoreVector> {
    let n = pool.n_train();
    let k = pool.k();
    if n <= k {
        return Err(Error::Invalid(format!(
            "Shapley form needs N_tr > K (N_tr={n}, K={k})"
        )));
    }
    if condacc.len() != n {
        return Err(Error::Invalid("score vector does not match pool".into()));
    }
    let a = pool.mean_accuracy();
    let scale = n as f64 / (n - k) as f64;
    Ok(ScoreVector {
        method: ScoreMethod::Shapley,
        scores: condacc.scores.iter().map(|s| scale * (s - a)).collect(),
        support: condacc.support.clone(),
    })
}

/// Dev accuracy of each training example used alone as a one-shot prompt.
pub fn oneshot_scores(dataset: &Dataset, backend: &dyn Backend) -> Result<ScoreVector> {
    let scores = dataset
        .train
        .par_iter()
        .map(|ex| {
            let p = Prompt::from_ids(vec![ex.id], dataset)?;
            let out = run_prompt(&p, dataset, backend)?;
            Ok(crate::pool::accuracy_of(&out))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreVector {
        method: ScoreMethod::Oneshot,
        support: vec![dataset.dev.len(); scores.len()],
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// `None` when either score vector has zero variance.
    pub pearson: Option<f64>,
    pub overlap: usize,
}

/// Correlation of two models' scores over the shared ids and the overlap of
/// their selected subsets.
pub fn cross_model_agreement(
    a: &ScoreVector,
    b: &ScoreVector,
    subset_a: &BTreeSet<ExampleId>,
    subset_b: &BTreeSet<ExampleId>,
) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "score vectors cover different universes ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(Agreement {
        pearson: pearson(&a.scores, &b.scores),
        overlap: subset_a.intersection(subset_b).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_dataset, SyntheticCorpus};
    use crate::pool::{pool_from_outcomes, PoolManifest, SamplingConfig};

    fn hand_pool() -> PromptPool {
        let d = synthetic_dataset("t", &SyntheticCorpus::new(4, 2, 0)).unwrap();
        let mut d = d;
        d.train.truncate(3);
        d.dev.clear();
        // 5 dev outcomes per record encode the target accuracies.
        let mk = |acc: f64| -> Vec<f64> {
            let pos = (acc * 5.0).round() as usize;
            (0..5).map(|i| if i < pos { 1.0 } else { -1.0 }).collect()
        };
        let mut s = SamplingConfig::new(2, 3, false, 0);
        s.min_occurrence = 0;
        let mut m = PoolManifest::new(&d, &s, 3, "synthetic", "x");
        m.n_dev = 5;
        let rows = vec![
            (Prompt { example_ids: vec![0, 1], label_pattern: vec![0, 1] }, mk(0.8)),
            (Prompt { example_ids: vec![0, 2], label_pattern: vec![0, 0] }, mk(0.4)),
            (Prompt { example_ids: vec![1, 2], label_pattern: vec![1, 0] }, mk(0.6)),
        ];
        pool_from_outcomes(m, rows).unwrap()
    }

    #[test]
    fn condacc_hand_example() {
        let s = condacc_scores(&hand_pool()).unwrap();
        assert!((s.scores[0] - 0.6).abs() < 1e-12);
        assert!((s.scores[1] - 0.7).abs() < 1e-12);
        assert!((s.scores[2] - 0.5).abs() < 1e-12);
        assert_eq!(s.support, [2, 2, 2]);
        assert_eq!(s.ranking(), [1, 0, 2]);
    }

    #[test]
    fn shapley_centered_and_n_equals_k() {
        let pool = hand_pool();
        let ca = ScoreVector {
            method: ScoreMethod::Condacc,
            scores: vec![pool.mean_accuracy(); 3],
            support: vec![2; 3],
        };
        let sh = shapley_scores(&ca, &pool).unwrap();
        assert!(sh.scores.iter().all(|s| s.abs() < 1e-15));

        let mut tight = pool.clone();
        tight.manifest.n_train = 2;
        assert!(shapley_scores(&ca, &tight).is_err());
    }

    #[test]
    fn zero_occurrence_is_error() {
        let mut pool = hand_pool();
        pool.manifest.n_train = 4;
        pool.occurrence_index.push(Vec::new());
        assert!(condacc_scores(&pool).is_err());
    }

    #[test]
    fn agreement_identities() {
        let a = ScoreVector {
            method: ScoreMethod::Condacc,
            scores: vec![0.1, 0.5, 0.3],
            support: vec![1; 3],
        };
        let neg = ScoreVector {
            scores: a.scores.iter().map(|x| -x).collect(),
            ..a.clone()
        };
        let s: BTreeSet<_> = [0, 1].into();
        let r = cross_model_agreement(&a, &a, &s, &s).unwrap();
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.overlap, 2);
        let r = cross_model_agreement(&a, &neg, &s, &BTreeSet::new()).unwrap();
        assert!((r.pearson.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r.overlap, 0);
        let flat = ScoreVector {
            scores: vec![0.2; 3],
            ..a.clone()
        };
        assert_eq!(cross_model_agreement(&a, &flat, &s, &s).unwrap().pearson, None);
    }

    #[test]
    fn score_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let s = condacc_scores(&hand_pool()).unwrap();
        s.save(&p).unwrap();
        assert_eq!(ScoreVector::load(&p).unwrap(), s);
    }
}

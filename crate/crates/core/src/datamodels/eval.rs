use serde::{Deserialize, Serialize};

use super::{Datamodel, DatamodelSuite};
use crate::condacc::{ScoreMethod, ScoreVector};
use crate::error::{Error, Result};
use crate::pool::PromptPool;
use crate::stats::pearson;

/// Which models score a held-out prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// The prompt's label-pattern bucket, else phase 1.
    #[default]
    Bucketed,
    Phase1Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    /// Mean Pearson r over datamodels with defined correlation.
    pub mean_correlation: Option<f64>,
    /// Mean absolute error over all (prompt, dev example) pairs.
    pub mean_l1: f64,
    pub n_prompts: usize,
    pub n_models: usize,
    /// Datamodels whose predictions (or targets) had zero variance.
    pub undefined_correlations: usize,
    pub routing: Routing,
}

pub fn heldout_eval(suite: &DatamodelSuite, heldout: &PromptPool, routing: Routing) -> Result<HeldoutReport> {
    if heldout.is_empty() {
        return Err(Error::Pool("held-out pool is empty".into()));
    }
    if heldout.n_train() != suite.n_train || heldout.k() != suite.k || heldout.manifest.n_dev != suite.dev_count() {
        return Err(Error::Invalid("held-out pool does not match the suite's dimensions".into()));
    }
    let mut rs = Vec::new();
    let mut undefined = 0;
    let mut l1 = 0.0;
    for d in 0..suite.dev_count() {
        let mut pred = Vec::with_capacity(heldout.len());
        let mut truth = Vec::with_capacity(heldout.len());
        for r in &heldout.records {
            let m: &Datamodel = match routing {
                Routing::Bucketed => suite.route(&r.prompt.label_pattern, d),
                Routing::Phase1Only => &suite.phase1[d],
            };
            let p = m.predict(&r.prompt);
            l1 += (p - r.dev_outcomes[d]).abs();
            pred.push(p);
            truth.push(r.dev_outcomes[d]);
        }
        match pearson(&pred, &truth) {
            Some(r) => rs.push(r),
            None => undefined += 1,
        }
    }
    let pairs = (heldout.len() * suite.dev_count()) as f64;
    Ok(HeldoutReport {
        mean_correlation: (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64),
        mean_l1: l1 / pairs,
        n_prompts: heldout.len(),
        n_models: suite.dev_count(),
        undefined_correlations: undefined,
        routing,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSets {
    /// Every label-pattern bucket contributes one set of datamodels.
    #[default]
    AllBuckets,
    Phase1Only,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Number of strictly positive weights.
    #[default]
    PositiveCount,
    MeanWeight,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    #[serde(default)]
    pub sets: ScoreSets,
    #[serde(default)]
    pub aggregation: Aggregation,
}

/// Per-example score from the weights assigned to it over model sets, dev
/// examples, and positions.
pub fn datamodels_scores(suite: &DatamodelSuite, opts: ScoreOptions) -> ScoreVector {
    let sets = match opts.sets {
        ScoreSets::AllBuckets => suite.model_sets(),
        ScoreSets::Phase1Only => vec![suite.phase1.as_slice()],
    };
    let (n, k) = (suite.n_train, suite.k);
    let mut scores = vec![0.0; n];
    for models in &sets {
        for m in *models {
            for (i, s) in scores.iter_mut().enumerate() {
                for j in 0..k {
                    let w = m.weights[i * k + j];
                    *s += match opts.aggregation {
                        Aggregation::PositiveCount => f64::from(u8::from(w > 0.0)),
                        Aggregation::MeanWeight => w,
                    };
                }
            }
        }
    }
    let n_models = sets.iter().map(|s| s.len()).sum::<usize>();
    if opts.aggregation == Aggregation::MeanWeight {
        let denom = (n_models * k) as f64;
        for s in &mut scores {
            *s /= denom;
        }
    }
    ScoreVector {
        method: ScoreMethod::Datamodels,
        scores,
        support: vec![n_models; n],
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::backend::PatternOverride;
    use crate::datamodels::{fit_suite, Bucket, SuiteConfig};
    use crate::pool::{sample_heldout_pool, PromptPool};
    use crate::testutil::{oracle_pool, spec_pool};

    fn suite_from(models: Vec<Datamodel>, k: usize, n: usize) -> DatamodelSuite {
        DatamodelSuite {
            config: SuiteConfig::default(),
            n_train: n,
            k,
            phase1: models,
            phase2: BTreeMap::new(),
        }
    }

    #[test]
    fn hand_fixture_counts() {
        let mut a = Datamodel::zeros(6, 2, 0);
        let mut b = Datamodel::zeros(6, 2, 1);
        a.weights[10] = 0.4;
        a.weights[11] = -0.1;
        b.weights[10] = 0.2;
        b.weights[11] = 0.3;
        let s = datamodels_scores(&suite_from(vec![a, b], 2, 6), ScoreOptions::default());
        assert_eq!(s.scores[5], 3.0);
        assert!(s.scores[..5].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn all_positive_single_bucket_hits_bound() {
        let models: Vec<_> = (0..100)
            .map(|d| {
                let mut m = Datamodel::zeros(3, 4, d);
                m.weights.iter_mut().for_each(|w| *w = -1.0);
                m.weights[4..8].iter_mut().for_each(|w| *w = 0.5);
                m
            })
            .collect();
        let mut suite = suite_from(models.clone(), 4, 3);
        suite.phase2.insert(vec![0, 1, 0, 1], Bucket { n_records: 60, models: Some(models) });
        let s = datamodels_scores(&suite, ScoreOptions::default());
        assert_eq!(s.scores, [0.0, 400.0, 0.0]);
    }

    #[test]
    fn mean_weight_variant() {
        let mut a = Datamodel::zeros(2, 2, 0);
        a.weights = vec![1.0, 3.0, -2.0, 0.0];
        let s = datamodels_scores(
            &suite_from(vec![a], 2, 2),
            ScoreOptions { sets: ScoreSets::Phase1Only, aggregation: Aggregation::MeanWeight },
        );
        assert_eq!(s.scores, [2.0, -1.0]);
    }

    fn heldout_for(pool: &PromptPool, spec: &crate::backend::SyntheticOracleSpec, n: usize) -> PromptPool {
        let d = crate::testutil::dataset(spec.n_train, 5);
        let prompts = sample_heldout_pool(&d, spec.k, n, pool, 99).unwrap();
        let backend = crate::backend::SyntheticBackend::new(spec.clone());
        let rows = prompts
            .into_iter()
            .map(|p| {
                let o = crate::pool::run_prompt(&p, &d, &backend).unwrap();
                (p, o)
            })
            .collect();
        crate::pool::pool_from_outcomes(pool.manifest.clone(), rows).unwrap()
    }

    #[test]
    fn noiseless_heldout_is_exact() {
        let (pool, spec) = oracle_pool(20, 3, 1_000, 0.0, 4);
        let suite = fit_suite(&pool, SuiteConfig::default()).unwrap();
        let held = heldout_for(&pool, &spec, 60);
        let rep = heldout_eval(&suite, &held, Routing::Bucketed).unwrap();
        assert!(rep.mean_correlation.unwrap() > 1.0 - 1e-9);
        assert!(rep.mean_l1 < 1e-6, "{}", rep.mean_l1);
        assert_eq!(rep.undefined_correlations, 0);
    }

    #[test]
    fn noisy_fixture_correlation() {
        let (pool, spec) = oracle_pool(24, 3, 3_000, 0.1, 8);
        let suite = fit_suite(&pool, SuiteConfig::default()).unwrap();
        let held = heldout_for(&pool, &spec, 80);
        let rep = heldout_eval(&suite, &held, Routing::Bucketed).unwrap();
        assert!(rep.mean_correlation.unwrap() >= 0.99, "{rep:?}");
    }

    #[test]
    fn constant_predictions_are_counted_not_averaged() {
        let (pool, _) = oracle_pool(8, 2, 300, 0.0, 1);
        let suite = suite_from((0..pool.manifest.n_dev).map(|d| Datamodel::zeros(8, 2, d)).collect(), 2, 8);
        let rep = heldout_eval(&suite, &pool, Routing::Phase1Only).unwrap();
        assert_eq!(rep.mean_correlation, None);
        assert_eq!(rep.undefined_correlations, pool.manifest.n_dev);
    }

    #[test]
    fn pattern_dependent_oracle_prefers_buckets() {
        let mut spec = crate::backend::SyntheticOracleSpec::random(20, 3, 1.0, 21);
        spec.train_labels = (0..20).map(|i| i % 2).collect();
        spec.pattern_overrides = vec![
            PatternOverride { pattern: vec![0, 0, 1], weight_scale: -1.0, bias_shift: 0.5 },
            PatternOverride { pattern: vec![1, 1, 0], weight_scale: 2.0, bias_shift: -0.5 },
        ];
        let pool = spec_pool(&spec, 1_500, 3);
        let suite = fit_suite(&pool, SuiteConfig::default()).unwrap();
        let held = heldout_for(&pool, &spec, 40);
        let both = heldout_eval(&suite, &held, Routing::Bucketed).unwrap();
        let p1 = heldout_eval(&suite, &held, Routing::Phase1Only).unwrap();
        assert!(both.mean_l1 < p1.mean_l1, "{} vs {}", both.mean_l1, p1.mean_l1);
    }
}

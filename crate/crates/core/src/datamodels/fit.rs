use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use super::{encode_features, pattern_key, Bucket, Datamodel, DatamodelSuite, LabelPattern, SuiteConfig};
use crate::error::{Error, Result};
use crate::pool::{PromptPool, PromptRecord};

/// Centered normal equations for one set of records.
///
/// The objective is `sum_n (g(x_n) - y_n)^2 + lambda * |w - w0|^2` with an
/// unregularized bias. Eliminating the bias leaves
/// `(Xc'Xc + lambda I) w = Xc'(y - mean y) + lambda w0` over the columns the
/// records actually touch; untouched columns keep their prior `w0`.
struct Design<'a> {
    n_train: usize,
    k: usize,
    records: &'a [&'a PromptRecord],
    cols: Vec<usize>,
    /// Local column per record and position.
    rows: Vec<Vec<usize>>,
    means: Vec<f64>,
    lhs: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> Design<'a> {
    fn new(records: &'a [&'a PromptRecord], n_train: usize, k: usize, lambda: f64, bucket: &str) -> Result<Self> {
        let mut local = vec![usize::MAX; n_train * k];
        let mut cols = Vec::new();
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            if r.prompt.k() != k {
                return Err(Error::Pool(format!("record {} has {} positions, pool K is {k}", r.index, r.prompt.k())));
            }
            let row = encode_features(&r.prompt, k)
                .into_iter()
                .map(|f| {
                    if local[f] == usize::MAX {
                        local[f] = cols.len();
                        cols.push(f);
                    }
                    local[f]
                })
                .collect::<Vec<_>>();
            rows.push(row);
        }
        let p = cols.len();
        let m = records.len() as f64;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut counts = vec![0.0; p];
        for row in &rows {
            for &a in row {
                counts[a] += 1.0;
                for &b in row {
                    gram[(a, b)] += 1.0;
                }
            }
        }
        for a in 0..p {
            for b in 0..p {
                gram[(a, b)] -= counts[a] * counts[b] / m;
            }
            gram[(a, a)] += lambda;
        }
        let chol = gram.clone().cholesky().ok_or_else(|| {
            Error::Singular(format!("bucket {bucket}: normal matrix is not positive definite"))
        })?;
        Ok(Self {
            n_train,
            k,
            records,
            cols,
            rows,
            means: counts.iter().map(|c| c / m).collect(),
            lhs: gram,
            chol,
        })
    }

    /// Fits every dev example at once, sharing one factorization.
    fn solve(&self, n_dev: usize, lambda: f64, prior: Option<&[Datamodel]>, bucket: &str) -> Result<Vec<Datamodel>> {
        let p = self.cols.len();
        let m = self.records.len() as f64;
        let mut ybar = vec![0.0; n_dev];
        for r in self.records {
            for (d, &y) in r.dev_outcomes.iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::Fit {
                        dev_id: d,
                        bucket: bucket.to_string(),
                        message: format!("non-finite margin in record {}", r.index),
                    });
                }
                ybar[d] += y;
            }
        }
        for y in &mut ybar {
            *y /= m;
        }
        let mut rhs = DMatrix::<f64>::zeros(p, n_dev);
        for (r, row) in self.records.iter().zip(&self.rows) {
            for &a in row {
                for d in 0..n_dev {
                    rhs[(a, d)] += r.dev_outcomes[d] - ybar[d];
                }
            }
        }
        if let Some(prior) = prior {
            for (a, &f) in self.cols.iter().enumerate() {
                for d in 0..n_dev {
                    rhs[(a, d)] += lambda * prior[d].weights[f];
                }
            }
        }
        let mut sol = self.chol.solve(&rhs);
        let resid = &rhs - &self.lhs * &sol;
        sol += self.chol.solve(&resid);

        let mut out = Vec::with_capacity(n_dev);
        for d in 0..n_dev {
            let mut model = match prior {
                Some(pr) => pr[d].clone(),
                None => Datamodel::zeros(self.n_train, self.k, d),
            };
            let mut dot = 0.0;
            for (a, &f) in self.cols.iter().enumerate() {
                let w = sol[(a, d)];
                if !w.is_finite() {
                    return Err(Error::Fit {
                        dev_id: d,
                        bucket: bucket.to_string(),
                        message: "solution is not finite".into(),
                    });
                }
                model.weights[f] = w;
                dot += self.means[a] * w;
            }
            model.bias = ybar[d] - dot;
            model.dev_id = d;
            out.push(model);
        }
        Ok(out)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda == 0.0 {
        return Err(Error::Singular(
            "the indicator design has constant row sums, so lambda = 0 never has a unique solution; use lambda > 0".into(),
        ));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

fn check_pool(pool: &PromptPool) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Pool("cannot fit datamodels on an empty pool".into()));
    }
    if pool.manifest.n_dev == 0 {
        return Err(Error::Pool("pool has no dev outcomes".into()));
    }
    Ok(())
}

/// Shared datamodel for one dev example, fit on every record.
pub fn fit_phase1(pool: &PromptPool, dev_id: usize, lambda: f64) -> Result<Datamodel> {
    check_lambda(lambda)?;
    check_pool(pool)?;
    if dev_id >= pool.manifest.n_dev {
        return Err(Error::Invalid(format!("dev id {dev_id} out of range")));
    }
    let recs: Vec<&PromptRecord> = pool.records.iter().collect();
    let design = Design::new(&recs, pool.n_train(), pool.k(), lambda, "shared")?;
    let mut all = design.solve(pool.manifest.n_dev, lambda, None, "shared")?;
    Ok(all.swap_remove(dev_id))
}

/// Phase 1 on the whole pool, then one refit per label pattern with enough
/// records, regularized toward the phase-1 weights.
pub fn fit_suite(pool: &PromptPool, config: SuiteConfig) -> Result<DatamodelSuite> {
    check_lambda(config.lambda)?;
    check_pool(pool)?;
    let (n, k, n_dev) = (pool.n_train(), pool.k(), pool.manifest.n_dev);
    let recs: Vec<&PromptRecord> = pool.records.iter().collect();
    let phase1 = Design::new(&recs, n, k, config.lambda, "shared")?.solve(n_dev, config.lambda, None, "shared")?;

    let mut buckets: BTreeMap<LabelPattern, Vec<&PromptRecord>> = BTreeMap::new();
    for r in &pool.records {
        buckets.entry(r.prompt.label_pattern.clone()).or_default().push(r);
    }
    let fitted = buckets
        .par_iter()
        .map(|(pattern, recs)| {
            if recs.len() < config.bucket_threshold {
                return Ok(Bucket {
                    n_records: recs.len(),
                    models: None,
                });
            }
            let key = pattern_key(pattern);
            let mut models = Design::new(recs, n, k, config.lambda, &key)?.solve(n_dev, config.lambda, Some(&phase1), &key)?;
            for m in &mut models {
                m.bucket = Some(pattern.clone());
            }
            Ok(Bucket {
                n_records: recs.len(),
                models: Some(models),
            })
        })
        .collect::<Result<Vec<Bucket>>>()?;
    let phase2 = buckets.into_keys().zip(fitted).collect();
    log::info!("fitted datamodels: {n_dev} dev examples, {n} x {k} weights");
    Ok(DatamodelSuite {
        config,
        n_train: n,
        k,
        phase1,
        phase2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodels::gauge_centered;
    use crate::pool::{Prompt, PromptRecord};
    use crate::testutil::{oracle_pool, raw_pool};

    /// Gradient of the ridge objective at the fitted parameters.
    fn gradient(pool: &PromptPool, m: &Datamodel, lambda: f64, prior: Option<&Datamodel>) -> f64 {
        let mut gw = vec![0.0; m.weights.len()];
        let mut gb = 0.0;
        for r in &pool.records {
            let e = m.predict(&r.prompt) - r.dev_outcomes[m.dev_id];
            gb += 2.0 * e;
            for f in encode_features(&r.prompt, m.k) {
                gw[f] += 2.0 * e;
            }
        }
        let mut worst = gb.abs();
        for (f, g) in gw.iter_mut().enumerate() {
            let w0 = prior.map_or(0.0, |p| p.weights[f]);
            *g += 2.0 * lambda * (m.weights[f] - w0);
            worst = worst.max(g.abs());
        }
        worst
    }

    #[test]
    fn constant_target_gives_bias_only() {
        let pool = raw_pool(6, 2, 400, 3, |_, _| 1.25);
        let m = fit_phase1(&pool, 1, 1e-6).unwrap();
        assert!((m.bias - 1.25).abs() < 1e-12);
        assert!(m.weights.iter().all(|w| w.abs() < 1e-12));
    }

    #[test]
    fn zero_lambda_is_singular() {
        let pool = raw_pool(6, 2, 100, 1, |_, _| 0.0);
        let err = fit_phase1(&pool, 0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(err.to_string().contains("lambda > 0"));
    }

    #[test]
    fn normal_equations_hold() {
        let (pool, _) = oracle_pool(12, 3, 2_000, 0.3, 7);
        let lambda = 1e-3;
        let suite = fit_suite(&pool, SuiteConfig { lambda, bucket_threshold: 100 }).unwrap();
        for m in &suite.phase1 {
            assert!(gradient(&pool, m, lambda, None) < 1e-8);
        }
        for (pattern, b) in &suite.phase2 {
            let Some(models) = &b.models else { continue };
            let mut sub = pool.clone();
            sub.records.retain(|r| &r.prompt.label_pattern == pattern);
            for (m, p1) in models.iter().zip(&suite.phase1) {
                assert!(gradient(&sub, m, lambda, Some(p1)) < 1e-8);
            }
        }
    }

    #[test]
    fn recovers_noiseless_oracle_after_centering() {
        let (pool, spec) = oracle_pool(10, 2, 1_500, 0.0, 3);
        let m = fit_phase1(&pool, 0, 1e-6).unwrap();
        let got = gauge_centered(&m.weights, 10, 2);
        let want = gauge_centered(&spec.true_weights, 10, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_pattern_bucket_matches_phase1_refit() {
        // Every prompt has pattern [0, 0]: the bucket sees the same data.
        let pool = raw_pool(6, 2, 300, 1, |p: &Prompt, d| (p.example_ids[0] as f64) - 0.5 * p.example_ids[1] as f64 + d as f64);
        let mut one = pool.clone();
        for r in &mut one.records {
            r.prompt.label_pattern = vec![0, 0];
        }
        let suite = fit_suite(&one, SuiteConfig { lambda: 1e-6, bucket_threshold: 10 }).unwrap();
        assert_eq!(suite.phase2.len(), 1);
        let b = suite.phase2.values().next().unwrap().models.as_ref().unwrap();
        for (a, p1) in b.iter().zip(&suite.phase1) {
            for r in &one.records {
                let diff = (a.predict(&r.prompt) - p1.predict(&r.prompt)).abs();
                assert!(diff < 1e-7, "{diff}");
            }
        }
    }

    #[test]
    fn small_buckets_fall_back() {
        let (pool, _) = oracle_pool(8, 2, 200, 0.1, 2);
        let suite = fit_suite(&pool, SuiteConfig { lambda: 1e-6, bucket_threshold: 1_000 }).unwrap();
        assert!(suite.phase2.values().all(|b| b.models.is_none()));
        let total: usize = suite.phase2.values().map(|b| b.n_records).sum();
        assert_eq!(total, pool.len());
        let r: &PromptRecord = &pool.records[0];
        assert_eq!(suite.route(&r.prompt.label_pattern, 0), &suite.phase1[0]);
    }

    #[test]
    fn non_finite_margin_names_dev_and_bucket() {
        let pool = raw_pool(6, 2, 100, 2, |_, d| if d == 1 { f64::INFINITY } else { 0.0 });
        match fit_phase1(&pool, 0, 1e-6).unwrap_err() {
            Error::Fit { dev_id, bucket, .. } => {
                assert_eq!(dev_id, 1);
                assert_eq!(bucket, "shared");
            }
            e => panic!("{e}"),
        }
    }
}

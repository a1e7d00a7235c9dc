//! Evaluation protocols: random prompts from a subset scored on the test
//! split, single-label prompts, out-of-distribution test sets, and MaxShot.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{outcome, Backend, BackendError};
use crate::corpus::{Dataset, ExampleId, Split};
use crate::error::{Error, Result};
use crate::selection::{calibrated_predict, fit_calibrator, SubsetSpec};
use crate::stats::{hash_words, mean, population_std};

pub const DEFAULT_EVAL_PROMPTS: usize = 50;
const MAX_DRAWS: usize = 10_000;
const MAX_OVERFLOW_RETRIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub n_prompts: usize,
    pub seed: u64,
    /// Every prompt must contain each class at least once.
    pub min_one_per_class: bool,
    pub calibrate: bool,
}

impl EvalConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            n_prompts: DEFAULT_EVAL_PROMPTS,
            seed,
            min_one_per_class: true,
            calibrate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub example_ids: Vec<ExampleId>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub dataset: String,
    pub test_dataset: String,
    pub subset_method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_source: Option<String>,
    pub backend: String,
    pub config: EvalConfig,
    pub n_prompts: usize,
    pub avg: f64,
    pub std: f64,
    pub min: f64,
    pub per_prompt: Vec<PromptResult>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// avg, population std, and min of prompt accuracies.
pub fn summarize(accs: &[f64]) -> (f64, f64, f64) {
    (mean(accs), population_std(accs), accs.iter().copied().fold(f64::INFINITY, f64::min))
}

struct Context<'a> {
    source: &'a Dataset,
    target: &'a Dataset,
    backend: &'a dyn Backend,
    calibrate: bool,
}

impl Context<'_> {
    /// Test accuracy of one ordered prompt.
    fn accuracy(&self, ids: &[ExampleId]) -> Result<f64> {
        let cal = if self.calibrate {
            Some(fit_calibrator(ids, self.source, self.backend)?)
        } else {
            None
        };
        let mut correct = 0usize;
        for ex in &self.target.test {
            let q = self.target.query_ref(Split::Test, ex);
            let rendered = self.source.render(ids, &ex.input, Some(q))?;
            let scores = self.backend.score_labels(&rendered)?;
            let ok = match &cal {
                Some(c) => calibrated_predict(&scores, c) == ex.label,
                None => outcome(&scores, ex.label) > 0.0,
            };
            correct += usize::from(ok);
        }
        Ok(correct as f64 / self.target.test.len() as f64)
    }
}

fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_words(seed, [slot as u64]))
}

/// One uniformly ordered K-sample of `members`, by rejection when every
/// class must appear.
fn draw(members: &[ExampleId], k: usize, labels: &[usize], classes: usize, constrain: bool, rng: &mut ChaCha8Rng) -> Result<Vec<ExampleId>> {
    for _ in 0..MAX_DRAWS {
        let mut ids: Vec<ExampleId> = sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect();
        ids.shuffle(rng);
        if !constrain {
            return Ok(ids);
        }
        let mut seen = vec![false; classes];
        for &id in &ids {
            seen[labels[id]] = true;
        }
        if seen.iter().all(|s| *s) {
            return Ok(ids);
        }
    }
    Err(Error::Sampling(format!(
        "no prompt covering all {classes} classes after {MAX_DRAWS} draws"
    )))
}

fn check_members(members: &[ExampleId], dataset: &Dataset, cfg: &EvalConfig) -> Result<()> {
    if cfg.k == 0 || cfg.n_prompts == 0 {
        return Err(Error::Invalid("K and n_prompts must be positive".into()));
    }
    if members.len() < cfg.k {
        return Err(Error::Sampling(format!(
            "subset has {} examples, K={} needs at least that many",
            members.len(),
            cfg.k
        )));
    }
    for &id in members {
        dataset.example(Split::Train, id)?;
    }
    if cfg.min_one_per_class {
        let c = dataset.num_classes();
        let mut present = vec![false; c];
        for &id in members {
            present[dataset.train[id].label] = true;
        }
        if cfg.k < c || !present.iter().all(|p| *p) {
            return Err(Error::Sampling(format!(
                "min-one-per-class cannot hold: K={}, classes present {:?}",
                cfg.k, present
            )));
        }
    }
    Ok(())
}

fn run(members: &[ExampleId], ctx: &Context, cfg: &EvalConfig) -> Result<Vec<PromptResult>> {
    check_members(members, ctx.source, cfg)?;
    let labels = ctx.source.train_labels();
    let c = ctx.source.num_classes();
    let prompts = (0..cfg.n_prompts)
        .map(|i| draw(members, cfg.k, &labels, c, cfg.min_one_per_class, &mut slot_rng(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    prompts
        .into_par_iter()
        .map(|ids| {
            let accuracy = ctx.accuracy(&ids)?;
            Ok(PromptResult {
                example_ids: ids,
                accuracy,
            })
        })
        .collect()
}

fn report(protocol: &str, subset: Option<&SubsetSpec>, ctx: &Context, cfg: &EvalConfig, per_prompt: Vec<PromptResult>) -> EvalReport {
    let accs: Vec<f64> = per_prompt.iter().map(|p| p.accuracy).collect();
    let (avg, std, min) = summarize(&accs);
    EvalReport {
        protocol: protocol.to_string(),
        dataset: ctx.source.name.clone(),
        test_dataset: ctx.target.name.clone(),
        subset_method: subset.map_or_else(|| "maxshot".to_string(), |s| s.method.clone()),
        subset_source: subset.and_then(|s| s.source.clone()),
        backend: ctx.backend.model_id().to_string(),
        config: cfg.clone(),
        n_prompts: per_prompt.len(),
        avg,
        std,
        min,
        per_prompt,
    }
}

/// Standard protocol: `n_prompts` random K-shot prompts from the subset,
/// each scored on the whole test split.
pub fn evaluate_subset(subset: &SubsetSpec, dataset: &Dataset, backend: &dyn Backend, cfg: &EvalConfig) -> Result<EvalReport> {
    let ctx = Context {
        source: dataset,
        target: dataset,
        backend,
        calibrate: cfg.calibrate,
    };
    let per = run(&subset.ids, &ctx, cfg)?;
    let protocol = if cfg.calibrate { "calibrated" } else { "standard" };
    Ok(report(protocol, Some(subset), &ctx, cfg, per))
}

/// One report per class from prompts drawn only from that class's members.
pub fn evaluate_single_label(
    subset: &SubsetSpec,
    dataset: &Dataset,
    backend: &dyn Backend,
    cfg: &EvalConfig,
) -> Result<BTreeMap<usize, EvalReport>> {
    if dataset.num_classes() != 2 {
        return Err(Error::Unsupported("single-label prompts are defined for binary tasks".into()));
    }
    let ctx = Context {
        source: dataset,
        target: dataset,
        backend,
        calibrate: cfg.calibrate,
    };
    let side_cfg = EvalConfig {
        min_one_per_class: false,
        ..cfg.clone()
    };
    let mut out = BTreeMap::new();
    for class in 0..2 {
        let members: Vec<ExampleId> = subset
            .ids
            .iter()
            .copied()
            .filter(|&id| dataset.train.get(id).is_some_and(|x| x.label == class))
            .collect();
        if members.len() < cfg.k {
            return Err(Error::Sampling(format!(
                "class {class} side has {} examples, K={}",
                members.len(),
                cfg.k
            )));
        }
        let per = run(&members, &ctx, &side_cfg)?;
        out.insert(class, report(&format!("single-label-{class}"), Some(subset), &ctx, &side_cfg, per));
    }
    Ok(out)
}

/// Prompts rendered from `source`, test inputs from `target`.
pub fn evaluate_ood(
    subset: &SubsetSpec,
    source: &Dataset,
    target: &Dataset,
    backend: &dyn Backend,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if source.classes != target.classes {
        return Err(Error::Invalid(format!(
            "verbalizers differ: {:?} vs {:?}",
            source.classes, target.classes
        )));
    }
    if source.fields != target.fields {
        return Err(Error::Invalid(format!(
            "input fields differ: {:?} vs {:?}",
            source.fields, target.fields
        )));
    }
    let ctx = Context {
        source,
        target,
        backend,
        calibrate: cfg.calibrate,
    };
    let per = run(&subset.ids, &ctx, cfg)?;
    Ok(report("ood", Some(subset), &ctx, cfg, per))
}

/// Balanced `k_max`-shot prompts from the whole training split. A prompt
/// that overflows the context window is redrawn.
pub fn evaluate_maxshot(dataset: &Dataset, backend: &dyn Backend, k_max: usize, n_prompts: usize, seed: u64) -> Result<EvalReport> {
    let c = dataset.num_classes();
    if k_max == 0 || !k_max.is_multiple_of(c) {
        return Err(Error::Invalid(format!("K_max={k_max} must be a positive multiple of C={c}")));
    }
    let per_class = k_max / c;
    let by_class: Vec<Vec<ExampleId>> = (0..c)
        .map(|l| dataset.train.iter().filter(|x| x.label == l).map(|x| x.id).collect())
        .collect();
    if let Some(l) = by_class.iter().position(|m| m.len() < per_class) {
        return Err(Error::Sampling(format!("class {l} has fewer than {per_class} examples")));
    }
    if let Some(window) = backend.context_window() {
        let mut longest = 0;
        for ex in &dataset.train {
            let text = dataset.template.render_example(&ex.input, &dataset.classes[ex.label]);
            longest = longest.max(backend.count_tokens(&text)?);
        }
        if k_max * longest > window {
            log::warn!("K_max={k_max} x longest example ({longest} tokens) exceeds the {window}-token window; overflowing prompts will be redrawn");
        }
    }
    let cfg = EvalConfig {
        k: k_max,
        n_prompts,
        seed,
        min_one_per_class: true,
        calibrate: false,
    };
    let ctx = Context {
        source: dataset,
        target: dataset,
        backend,
        calibrate: false,
    };
    let per = (0..n_prompts)
        .into_par_iter()
        .map(|i| {
            let mut rng = slot_rng(seed, i);
            for _ in 0..MAX_OVERFLOW_RETRIES {
                let mut ids: Vec<ExampleId> = by_class
                    .iter()
                    .flat_map(|m| sample(&mut rng, m.len(), per_class).into_iter().map(|j| m[j]).collect::<Vec<_>>())
                    .collect();
                ids.shuffle(&mut rng);
                match ctx.accuracy(&ids) {
                    Ok(accuracy) => return Ok(PromptResult { example_ids: ids, accuracy }),
                    Err(Error::Backend(BackendError::ContextOverflow { .. })) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Sampling(format!(
                "prompt {i}: {MAX_OVERFLOW_RETRIES} draws at K_max={k_max} all overflowed the context window"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report("maxshot", None, &ctx, &cfg, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SyntheticBackend, SyntheticOracleSpec};
    use crate::selection::{select_random, SubsetSpec};
    use crate::testutil::dataset;

    fn oracle(n: usize, k: usize) -> SyntheticBackend {
        let mut s = SyntheticOracleSpec::random(n, k, 1.0, 2);
        s.true_bias = 0.3;
        s.query_offset_scale = 1.0;
        SyntheticBackend::new(s)
    }

    fn brute(ids: &[ExampleId], d: &Dataset, spec: &SyntheticOracleSpec) -> f64 {
        let ok = d
            .test
            .iter()
            .filter(|ex| spec.margin(ids, &d.query_ref(Split::Test, ex)).unwrap() > 0.0)
            .count();
        ok as f64 / d.test.len() as f64
    }

    #[test]
    fn report_matches_brute_force() {
        let d = dataset(20, 3);
        let b = oracle(20, 4);
        let s = select_random(&d, 8, 1).unwrap();
        let r = evaluate_subset(&s, &d, &b, &EvalConfig::new(4, 7)).unwrap();
        assert_eq!(r.n_prompts, 50);
        let accs: Vec<f64> = r.per_prompt.iter().map(|p| brute(&p.example_ids, &d, b.spec())).collect();
        assert_eq!(accs, r.per_prompt.iter().map(|p| p.accuracy).collect::<Vec<_>>());
        assert_eq!(summarize(&accs), (r.avg, r.std, r.min));
        assert!(r.min <= r.avg && r.std >= 0.0);
        for p in &r.per_prompt {
            let labels: Vec<usize> = p.example_ids.iter().map(|&i| d.train[i].label).collect();
            assert!(labels.contains(&0) && labels.contains(&1));
            assert!(p.example_ids.iter().all(|i| s.ids.contains(i)));
        }
        assert_eq!(r, evaluate_subset(&s, &d, &b, &EvalConfig::new(4, 7)).unwrap());
    }

    #[test]
    fn subset_of_exactly_k_permutes_one_set() {
        let d = dataset(20, 3);
        let b = oracle(20, 4);
        let s = select_random(&d, 4, 2).unwrap();
        let r = evaluate_subset(&s, &d, &b, &EvalConfig::new(4, 1)).unwrap();
        for p in &r.per_prompt {
            let mut ids = p.example_ids.clone();
            ids.sort_unstable();
            assert_eq!(ids, s.ids);
        }
    }

    #[test]
    fn single_class_subset_fails_constraint() {
        let d = dataset(20, 3);
        let b = oracle(20, 4);
        let s = SubsetSpec::new("x", [0, 2, 4, 6, 8].into(), &d, None);
        assert!(matches!(evaluate_subset(&s, &d, &b, &EvalConfig::new(4, 1)), Err(Error::Sampling(_))));
    }

    #[test]
    fn label_blind_oracle_single_label_sides() {
        let d = dataset(20, 3);
        let b = oracle(20, 4);
        let s = select_random(&d, 8, 4).unwrap();
        let reps = evaluate_single_label(&s, &d, &b, &EvalConfig::new(4, 3)).unwrap();
        for (class, r) in &reps {
            assert!(r.per_prompt.iter().all(|p| p.example_ids.iter().all(|&i| d.train[i].label == *class)));
            for p in &r.per_prompt {
                assert_eq!(p.accuracy, brute(&p.example_ids, &d, b.spec()));
            }
        }
    }

    #[test]
    fn ood_with_same_target_is_standard() {
        let d = dataset(20, 3);
        let b = oracle(20, 4);
        let s = select_random(&d, 8, 1).unwrap();
        let cfg = EvalConfig::new(4, 5);
        let a = evaluate_subset(&s, &d, &b, &cfg).unwrap();
        let o = evaluate_ood(&s, &d, &d, &b, &cfg).unwrap();
        assert_eq!(a.per_prompt, o.per_prompt);
        let mut other = d.clone();
        other.classes = vec!["bad".into(), "good".into()];
        assert!(evaluate_ood(&s, &d, &other, &b, &cfg).is_err());
    }

    #[test]
    fn ood_target_shift_matches_brute_force() {
        let d = dataset(20, 3);
        let mut t = dataset(20, 9);
        t.name = "shifted".into();
        let mut spec = SyntheticOracleSpec::random(20, 4, 1.0, 2);
        spec.dataset_shift.insert("shifted".into(), -0.7);
        let b = SyntheticBackend::new(spec.clone());
        let s = select_random(&d, 8, 1).unwrap();
        let r = evaluate_ood(&s, &d, &t, &b, &EvalConfig::new(4, 2)).unwrap();
        for p in &r.per_prompt {
            assert_eq!(p.accuracy, brute(&p.example_ids, &t, &spec));
        }
    }

    #[test]
    fn maxshot_balanced_and_resampled() {
        let d = dataset(20, 3);
        let b = oracle(20, 8);
        let r = evaluate_maxshot(&d, &b, 8, 10, 4).unwrap();
        for p in &r.per_prompt {
            assert_eq!(p.example_ids.iter().filter(|&&i| d.train[i].label == 0).count(), 4);
            assert_eq!(p.accuracy, brute(&p.example_ids, &d, b.spec()));
        }
        let mut tight = b.spec().clone();
        tight.context_window = Some(10);
        assert!(matches!(
            evaluate_maxshot(&d, &SyntheticBackend::new(tight), 8, 2, 4),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn uniform_label_scores_calibrate_to_identity() {
        let d = dataset(20, 3);
        let mut spec = SyntheticOracleSpec::random(20, 4, 1.0, 2);
        spec.true_bias = 0.2;
        let b = SyntheticBackend::new(spec);
        let s = select_random(&d, 8, 1).unwrap();
        let mut cfg = EvalConfig::new(4, 5);
        let plain = evaluate_subset(&s, &d, &b, &cfg).unwrap();
        cfg.calibrate = true;
        let cal = evaluate_subset(&s, &d, &b, &cfg).unwrap();
        assert_eq!(plain.per_prompt, cal.per_prompt);
    }
}

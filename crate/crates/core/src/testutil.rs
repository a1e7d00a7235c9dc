//! Pool fixtures shared by unit tests.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{SyntheticBackend, SyntheticOracleSpec};
use crate::corpus::{synthetic_dataset, Dataset, SyntheticCorpus};
use crate::pool::{pool_from_outcomes, run_prompt, PoolManifest, Prompt, PromptPool, SamplingConfig};

pub fn dataset(n_train: usize, seed: u64) -> Dataset {
    synthetic_dataset("toy", &SyntheticCorpus::new(n_train, 2, seed)).unwrap()
}

fn uniform_prompts(d: &Dataset, k: usize, m: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| Prompt::from_ids(sample(&mut rng, d.train.len(), k).into_vec(), d).unwrap())
        .collect()
}

fn manifest(d: &Dataset, k: usize, m: usize, n_dev: usize) -> PoolManifest {
    let mut s = SamplingConfig::new(k, m, false, 0);
    s.min_occurrence = 0;
    let mut man = PoolManifest::new(d, &s, m, "test", "fixture");
    man.n_dev = n_dev;
    man
}

/// Uniform prompts over a binary toy corpus with margins from `f(prompt, dev)`.
pub fn raw_pool(n_train: usize, k: usize, m: usize, n_dev: usize, f: impl Fn(&Prompt, usize) -> f64) -> PromptPool {
    let d = dataset(n_train, 5);
    let rows = uniform_prompts(&d, k, m, 17)
        .into_iter()
        .map(|p| {
            let o = (0..n_dev).map(|dv| f(&p, dv)).collect();
            (p, o)
        })
        .collect();
    pool_from_outcomes(manifest(&d, k, m, n_dev), rows).unwrap()
}

/// Uniform prompts scored by a random synthetic oracle.
pub fn oracle_pool(n_train: usize, k: usize, m: usize, noise: f64, seed: u64) -> (PromptPool, SyntheticOracleSpec) {
    let mut spec = SyntheticOracleSpec::random(n_train, k, 1.0, seed);
    spec.noise_std = noise;
    spec.query_offset_scale = 0.5;
    (spec_pool(&spec, m, seed), spec)
}

pub fn spec_pool(spec: &SyntheticOracleSpec, m: usize, seed: u64) -> PromptPool {
    let d = dataset(spec.n_train, 5);
    let backend = SyntheticBackend::new(spec.clone());
    let rows = uniform_prompts(&d, spec.k, m, seed)
        .into_iter()
        .map(|p| {
            let o = run_prompt(&p, &d, &backend).unwrap();
            (p, o)
        })
        .collect();
    pool_from_outcomes(manifest(&d, spec.k, m, d.dev.len()), rows).unwrap()
}

//! The prompt pool: randomly sampled K-shot prompts, each run over the dev
//! set, with per-example occurrence bookkeeping.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{outcome, Backend};
use crate::corpus::{Dataset, ExampleId, Split};
use crate::error::{Error, Result};

/// Ordered in-context examples and their labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub example_ids: Vec<ExampleId>,
    pub label_pattern: Vec<usize>,
}

impl Prompt {
    pub fn from_ids(example_ids: Vec<ExampleId>, dataset: &Dataset) -> Result<Self> {
        let label_pattern = example_ids
            .iter()
            .map(|&id| dataset.example(Split::Train, id).map(|e| e.label))
            .collect::<Result<_>>()?;
        Ok(Self {
            example_ids,
            label_pattern,
        })
    }

    pub fn k(&self) -> usize {
        self.example_ids.len()
    }

    /// The unordered example set, as a sorted vector.
    pub fn id_set(&self) -> Vec<ExampleId> {
        let mut v = self.example_ids.clone();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// Position in sampling order.
    pub index: usize,
    #[serde(flatten)]
    pub prompt: Prompt,
    pub dev_outcomes: Vec<f64>,
    pub dev_accuracy: f64,
}

impl PromptRecord {
    pub fn new(index: usize, prompt: Prompt, dev_outcomes: Vec<f64>) -> Self {
        let dev_accuracy = accuracy_of(&dev_outcomes);
        Self {
            index,
            prompt,
            dev_outcomes,
            dev_accuracy,
        }
    }
}

/// Fraction of strictly positive margins.
pub fn accuracy_of(outcomes: &[f64]) -> f64 {
    outcomes.iter().filter(|m| **m > 0.0).count() as f64 / outcomes.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub k: usize,
    pub m: usize,
    #[serde(default)]
    pub balanced: bool,
    pub seed: u64,
    #[serde(default = "default_min_occurrence")]
    pub min_occurrence: usize,
    /// Append targeted prompts until every example meets `min_occurrence`.
    #[serde(default = "yes")]
    pub topup: bool,
    /// Forbid two copies of the same underlying input in one prompt.
    #[serde(default = "yes")]
    pub distinct_inputs: bool,
}

fn default_min_occurrence() -> usize {
    20
}
fn yes() -> bool {
    true
}

impl SamplingConfig {
    pub fn new(k: usize, m: usize, balanced: bool, seed: u64) -> Self {
        Self {
            k,
            m,
            balanced,
            seed,
            min_occurrence: default_min_occurrence(),
            topup: true,
            distinct_inputs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub dataset: String,
    pub setup: Setup,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_classes: usize,
    pub sampling: SamplingConfig,
    /// Prompts appended by the occurrence top-up phase.
    pub topup_prompts: usize,
    pub backend: String,
    pub model: String,
    #[serde(default)]
    pub failed_prompts: usize,
}

impl PoolManifest {
    pub fn new(dataset: &Dataset, sampling: &SamplingConfig, n_prompts: usize, backend: &str, model: &str) -> Self {
        Self {
            dataset: dataset.name.clone(),
            setup: if dataset.unlabeled {
                Setup::Unlabeled
            } else {
                Setup::Labeled
            },
            n_train: dataset.train.len(),
            n_dev: dataset.dev.len(),
            n_classes: dataset.num_classes(),
            sampling: sampling.clone(),
            topup_prompts: n_prompts.saturating_sub(sampling.m),
            backend: backend.to_string(),
            model: model.to_string(),
            failed_prompts: 0,
        }
    }

    fn same_run(&self, other: &Self) -> bool {
        Self {
            failed_prompts: 0,
            ..self.clone()
        } == Self {
            failed_prompts: 0,
            ..other.clone()
        }
    }
}

/// Location of one occurrence: (index into `records`, position in prompt).
pub type Occurrence = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub manifest: PoolManifest,
    pub records: Vec<PromptRecord>,
    /// `occurrence_index[id]` lists every occurrence of training example `id`.
    pub occurrence_index: Vec<Vec<Occurrence>>,
}

impl PromptPool {
    pub fn new(manifest: PoolManifest, records: Vec<PromptRecord>) -> Result<Self> {
        let mut occurrence_index = vec![Vec::new(); manifest.n_train];
        for (r, rec) in records.iter().enumerate() {
            if rec.dev_outcomes.len() != manifest.n_dev {
                return Err(Error::Pool(format!(
                    "record {} has {} dev outcomes, expected {}",
                    rec.index,
                    rec.dev_outcomes.len(),
                    manifest.n_dev
                )));
            }
            for (pos, &id) in rec.prompt.example_ids.iter().enumerate() {
                let slot = occurrence_index.get_mut(id).ok_or_else(|| {
                    Error::Pool(format!("record {} references example {id} >= N_tr", rec.index))
                })?;
                slot.push((r, pos));
            }
        }
        Ok(Self {
            manifest,
            records,
            occurrence_index,
        })
    }

    pub fn n_train(&self) -> usize {
        self.manifest.n_train
    }

    pub fn k(&self) -> usize {
        self.manifest.sampling.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Unweighted mean of record accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.dev_accuracy).sum::<f64>() / self.records.len() as f64
    }

    /// Checks accuracy/outcome consistency and the occurrence floor.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.dev_accuracy != accuracy_of(&r.dev_outcomes) {
                return Err(Error::Pool(format!("record {} accuracy inconsistent", r.index)));
            }
        }
        let floor = self.manifest.sampling.min_occurrence;
        let k = self.k();
        for (id, occ) in self.occurrence_index.iter().enumerate() {
            if occ.len() < floor {
                return Err(Error::Pool(format!(
                    "example {id} occurs {} times, floor is {floor}",
                    occ.len()
                )));
            }
            if k > 1 && floor > 1 {
                let positions: BTreeSet<usize> = occ.iter().map(|o| o.1).collect();
                if positions.len() < 2 {
                    return Err(Error::Pool(format!("example {id} occupies a single position")));
                }
            }
        }
        Ok(())
    }

    /// Reads `manifest.json` and `records.jsonl` from a pool directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?.ok_or_else(|| {
            Error::Pool(format!("{} has no manifest.json", dir.display()))
        })?;
        let mut records: Vec<PromptRecord> = read_records(&dir.join(RECORDS))?.into_values().collect();
        records.sort_by_key(|r| r.index);
        Self::new(manifest, records)
    }

    /// Writes the pool as a fresh directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(dir, &self.manifest)?;
        let path = dir.join(RECORDS);
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.jsonl";
pub const FAILURES: &str = "failures.jsonl";

fn read_manifest(dir: &Path) -> Result<Option<PoolManifest>> {
    let p = dir.join(MANIFEST);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn write_manifest(dir: &Path, m: &PoolManifest) -> Result<()> {
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(m)? + "\n").map_err(|e| Error::io(&p, e))
}

fn read_records(path: &Path) -> Result<BTreeMap<usize, PromptRecord>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptRecord>(line) {
            Ok(r) => {
                out.insert(r.index, r);
            }
            Err(_) if i + 1 == n => log::warn!("{}: dropping torn final record", path.display()),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Draws prompts honoring the balance and distinct-input constraints.
struct PromptSampler<'a> {
    dataset: &'a Dataset,
    k: usize,
    balanced: bool,
    distinct_inputs: bool,
    by_class: Vec<Vec<ExampleId>>,
}

const MAX_DRAWS: usize = 10_000;

impl<'a> PromptSampler<'a> {
    fn new(dataset: &'a Dataset, k: usize, balanced: bool, distinct_inputs: bool) -> Result<Self> {
        let n = dataset.train.len();
        let c = dataset.num_classes();
        if k == 0 {
            return Err(Error::Sampling("K must be >= 1".into()));
        }
        if k > n {
            return Err(Error::Sampling(format!("K={k} exceeds N_tr={n}")));
        }
        if balanced && k != c {
            return Err(Error::Sampling(format!("balanced prompts need K = C, got K={k}, C={c}")));
        }
        let mut by_class = vec![Vec::new(); c];
        for ex in &dataset.train {
            by_class[ex.label].push(ex.id);
        }
        if balanced {
            if let Some(cls) = by_class.iter().position(|v| v.is_empty()) {
                return Err(Error::Sampling(format!("class {cls} has no training examples")));
            }
        }
        if distinct_inputs {
            let groups: HashSet<ExampleId> = dataset.train.iter().map(|e| e.input_group()).collect();
            if groups.len() < k {
                return Err(Error::Sampling(format!(
                    "only {} distinct inputs for K={k}",
                    groups.len()
                )));
            }
        }
        Ok(Self {
            dataset,
            k,
            balanced,
            distinct_inputs,
            by_class,
        })
    }

    fn admissible(&self, id: ExampleId, chosen: &[ExampleId]) -> bool {
        if chosen.contains(&id) {
            return false;
        }
        if self.distinct_inputs {
            let g = self.dataset.train[id].input_group();
            return !chosen.iter().any(|&o| self.dataset.train[o].input_group() == g);
        }
        true
    }

    /// One prompt; `forced` pins an example to a position.
    fn draw(&self, rng: &mut impl Rng, forced: Option<(ExampleId, usize)>) -> Result<Vec<ExampleId>> {
        let k = self.k;
        let mut slots: Vec<Option<ExampleId>> = vec![None; k];
        let mut chosen = Vec::with_capacity(k);
        if let Some((id, pos)) = forced {
            slots[pos] = Some(id);
            chosen.push(id);
        }
        // Class assigned to each slot when balanced.
        let classes: Option<Vec<usize>> = self.balanced.then(|| {
            let mut cls: Vec<usize> = (0..k).collect();
            match forced {
                Some((id, pos)) => {
                    let fc = self.dataset.train[id].label;
                    cls.retain(|&c| c != fc);
                    cls.shuffle(rng);
                    cls.insert(pos, fc);
                }
                None => cls.shuffle(rng),
            }
            cls
        });
        for pos in 0..k {
            if slots[pos].is_some() {
                continue;
            }
            let pool: &[ExampleId] = match &classes {
                Some(cls) => &self.by_class[cls[pos]],
                None => &[],
            };
            let mut draws = 0;
            let id = loop {
                let cand = if classes.is_some() {
                    pool[rng.random_range(0..pool.len())]
                } else {
                    rng.random_range(0..self.dataset.train.len())
                };
                if self.admissible(cand, &chosen) {
                    break cand;
                }
                draws += 1;
                if draws >= MAX_DRAWS {
                    return Err(Error::Sampling(format!(
                        "could not fill position {pos} after {MAX_DRAWS} draws"
                    )));
                }
            };
            slots[pos] = Some(id);
            chosen.push(id);
        }
        Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
    }

    fn prompt(&self, ids: Vec<ExampleId>) -> Prompt {
        let label_pattern = ids.iter().map(|&i| self.dataset.train[i].label).collect();
        Prompt {
            example_ids: ids,
            label_pattern,
        }
    }
}

/// Samples `m` uniform random prompts, then (if enabled) appends targeted
/// prompts until every example occurs at least `min_occurrence` times over
/// at least two positions.
pub fn sample_pool(dataset: &Dataset, cfg: &SamplingConfig) -> Result<Vec<Prompt>> {
    if cfg.m == 0 {
        return Err(Error::Sampling("M must be >= 1".into()));
    }
    let sampler = PromptSampler::new(dataset, cfg.k, cfg.balanced, cfg.distinct_inputs)?;
    let n = dataset.train.len();
    let k = cfg.k;

    if cfg.topup && cfg.min_occurrence > 0 {
        let required = if cfg.balanced {
            sampler.by_class.iter().map(|v| v.len()).max().unwrap_or(0) * cfg.min_occurrence
        } else {
            (n * cfg.min_occurrence).div_ceil(k)
        };
        if cfg.m < required {
            return Err(Error::Sampling(format!(
                "min_occurrence {} is unreachable with M={}; need M >= {required}",
                cfg.min_occurrence, cfg.m
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prompts = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        prompts.push(sampler.prompt(sampler.draw(&mut rng, None)?));
    }

    if cfg.topup && cfg.min_occurrence > 0 {
        let mut count = vec![0usize; n];
        let mut positions = vec![BTreeSet::new(); n];
        let note = |p: &Prompt, count: &mut [usize], positions: &mut [BTreeSet<usize>]| {
            for (pos, &id) in p.example_ids.iter().enumerate() {
                count[id] += 1;
                positions[id].insert(pos);
            }
        };
        for p in &prompts {
            note(p, &mut count, &mut positions);
        }
        let need_spread = k > 1 && cfg.min_occurrence > 1;
        for id in 0..n {
            while count[id] < cfg.min_occurrence || (need_spread && positions[id].len() < 2) {
                let pos = if need_spread && positions[id].len() == 1 {
                    let taken = *positions[id].iter().next().expect("one position");
                    let p = rng.random_range(0..k - 1);
                    if p >= taken {
                        p + 1
                    } else {
                        p
                    }
                } else {
                    rng.random_range(0..k)
                };
                let p = sampler.prompt(sampler.draw(&mut rng, Some((id, pos)))?);
                note(&p, &mut count, &mut positions);
                prompts.push(p);
            }
        }
    }

    if dataset.num_classes() == 2 && !cfg.balanced && k <= 16 {
        let patterns: HashSet<&[usize]> = prompts.iter().map(|p| p.label_pattern.as_slice()).collect();
        if patterns.len() < 1 << k {
            log::warn!(
                "pool covers {} of {} binary label patterns",
                patterns.len(),
                1usize << k
            );
        }
    }
    Ok(prompts)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Samples `n` prompts whose unordered example sets appear neither in
/// `existing` nor earlier in the returned list.
pub fn sample_heldout_pool(
    dataset: &Dataset,
    k: usize,
    n: usize,
    existing: &PromptPool,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let s = &existing.manifest.sampling;
    let sampler = PromptSampler::new(dataset, k, s.balanced, s.distinct_inputs)?;
    let mut seen: HashSet<Vec<ExampleId>> =
        existing.records.iter().map(|r| r.prompt.id_set()).collect();
    let total: u128 = if s.balanced {
        sampler
            .by_class
            .iter()
            .fold(1u128, |acc, v| acc.saturating_mul(v.len() as u128))
    } else {
        binomial(dataset.train.len(), k)
    };
    let available = total.saturating_sub(seen.len() as u128);
    if available < n as u128 {
        return Err(Error::Sampling(format!(
            "only {available} unseen example combinations remain, {n} requested"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let ids = sampler.draw(&mut rng, None)?;
        let mut key = ids.clone();
        key.sort_unstable();
        if seen.insert(key) {
            out.push(sampler.prompt(ids));
            misses = 0;
        } else {
            misses += 1;
            if misses > 100 * MAX_DRAWS {
                return Err(Error::Sampling(
                    "unseen combinations exhausted during held-out sampling".into(),
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    /// Pool directory; `None` collects in memory only.
    pub out_dir: Option<PathBuf>,
    /// Prompts per parallel batch; batches are appended in sampling order.
    pub batch: usize,
    /// Abort when the failed fraction exceeds this.
    pub max_failure_rate: f64,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            batch: 256,
            max_failure_rate: 0.01,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FailureNote {
    index: usize,
    error: String,
}

/// Dev-set margins of one prompt.
pub fn run_prompt(prompt: &Prompt, dataset: &Dataset, backend: &dyn Backend) -> Result<Vec<f64>> {
    dataset
        .dev
        .iter()
        .map(|ex| {
            let r = dataset.render_query(&prompt.example_ids, Split::Dev, ex)?;
            Ok(outcome(&backend.score_labels(&r)?, ex.label))
        })
        .collect()
}

/// Runs every prompt over the dev set. With an output directory the run is
/// resumable: the manifest is written first, completed records are appended
/// in sampling order, and records already on disk are not recomputed.
pub fn collect(
    prompts: &[Prompt],
    dataset: &Dataset,
    backend: &dyn Backend,
    mut manifest: PoolManifest,
    opts: &CollectOptions,
) -> Result<PromptPool> {
    if dataset.dev.is_empty() {
        return Err(Error::EmptySplit("dev split is empty".into()));
    }
    let mut done: BTreeMap<usize, PromptRecord> = BTreeMap::new();
    let mut writers = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(prev) = read_manifest(dir)? {
            if !prev.same_run(&manifest) {
                return Err(Error::Pool(format!(
                    "{} holds a pool with a different configuration",
                    dir.display()
                )));
            }
        }
        write_manifest(dir, &manifest)?;
        let rec_path = dir.join(RECORDS);
        done = read_records(&rec_path)?;
        for (idx, r) in &done {
            if prompts.get(*idx) != Some(&r.prompt) {
                return Err(Error::Pool(format!(
                    "existing record {idx} does not match the sampled prompt"
                )));
            }
        }
        // Rewrite without any torn tail before appending.
        let mut f = File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        for r in done.values() {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&rec_path, e))?;
        }
        let fail_path = dir.join(FAILURES);
        let ff = File::create(&fail_path).map_err(|e| Error::io(&fail_path, e))?;
        writers = Some((f, ff, rec_path, fail_path));
    }

    let todo: Vec<usize> = (0..prompts.len()).filter(|i| !done.contains_key(i)).collect();
    let total = prompts.len();
    let mut failed = 0usize;
    for batch in todo.chunks(opts.batch.max(1)) {
        let results: Vec<(usize, Result<Vec<f64>>)> = batch
            .par_iter()
            .map(|&i| (i, run_prompt(&prompts[i], dataset, backend)))
            .collect();
        for (i, res) in results {
            match res {
                Ok(outcomes) => {
                    let rec = PromptRecord::new(i, prompts[i].clone(), outcomes);
                    if let Some((f, _, p, _)) = writers.as_mut() {
                        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
                    }
                    done.insert(i, rec);
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("prompt {i} failed: {e}");
                    if let Some((_, ff, _, p)) = writers.as_mut() {
                        let note = FailureNote {
                            index: i,
                            error: e.to_string(),
                        };
                        writeln!(ff, "{}", serde_json::to_string(&note)?).map_err(|e| Error::io(&*p, e))?;
                    }
                }
            }
        }
        if let Some((f, ff, p, _)) = writers.as_mut() {
            f.flush().and_then(|_| ff.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        if failed as f64 > opts.max_failure_rate * total as f64 {
            manifest.failed_prompts = failed;
            if let Some(dir) = &opts.out_dir {
                write_manifest(dir, &manifest)?;
            }
            return Err(Error::TooManyFailures { failed, total });
        }
    }
    manifest.failed_prompts = failed;
    if let Some(dir) = &opts.out_dir {
        write_manifest(dir, &manifest)?;
    }
    PromptPool::new(manifest, done.into_values().collect())
}

/// Builds a pool from (prompt, dev outcomes) rows in sampling order.
pub fn pool_from_outcomes(
    manifest: PoolManifest,
    rows: Vec<(Prompt, Vec<f64>)>,
) -> Result<PromptPool> {
    let records = rows
        .into_iter()
        .enumerate()
        .map(|(i, (p, o))| PromptRecord::new(i, p, o))
        .collect();
    PromptPool::new(manifest, records)
}

//! Subsets from scores, the baseline subsets, and contextual calibration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LabelScores};
use crate::condacc::ScoreVector;
use crate::corpus::{Dataset, ExampleId, Split};
use crate::error::{Error, Result};
use crate::pool::PromptPool;

pub const DEFAULT_SUBSET_SIZE: usize = 20;

/// Content-free probe inputs averaged by the calibrator.
pub const CONTENT_FREE_PROBES: [&str; 3] = ["N/A", "", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub method: String,
    #[serde(rename = "E")]
    pub e: usize,
    /// Ascending.
    pub ids: Vec<ExampleId>,
    pub per_class_counts: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl SubsetSpec {
    pub fn new(method: impl Into<String>, ids: BTreeSet<ExampleId>, dataset: &Dataset, source: Option<String>) -> Self {
        let mut per_class_counts: BTreeMap<usize, usize> = (0..dataset.num_classes()).map(|c| (c, 0)).collect();
        for &id in &ids {
            *per_class_counts.entry(dataset.train[id].label).or_default() += 1;
        }
        Self {
            method: method.into(),
            e: ids.len(),
            ids: ids.into_iter().collect(),
            per_class_counts,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn per_class(dataset: &Dataset, e: usize) -> Result<usize> {
    let c = dataset.num_classes();
    if e == 0 || !e.is_multiple_of(c) {
        return Err(Error::Selection(format!("E={e} must be a positive multiple of C={c}")));
    }
    Ok(e / c)
}

fn ranked_pick(scores: &ScoreVector, dataset: &Dataset, e: usize, ascending: bool) -> Result<BTreeSet<ExampleId>> {
    if scores.len() != dataset.train.len() {
        return Err(Error::Selection(format!(
            "score vector covers {} examples, training split has {}",
            scores.len(),
            dataset.train.len()
        )));
    }
    let per = per_class(dataset, e)?;
    let mut order: Vec<ExampleId> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores.scores[a], scores.scores[b]);
        let by_score = if ascending { sa.total_cmp(&sb) } else { sb.total_cmp(&sa) };
        by_score.then(a.cmp(&b))
    });
    let mut taken = vec![0usize; dataset.num_classes()];
    let mut out = BTreeSet::new();
    for id in order {
        let l = dataset.train[id].label;
        if taken[l] < per {
            taken[l] += 1;
            out.insert(id);
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < per) {
        return Err(Error::Selection(format!(
            "class {c} has only {} examples, {per} requested",
            taken[c]
        )));
    }
    Ok(out)
}

/// The `E/C` highest-scoring examples of each class; ties by ascending id.
pub fn select_top(scores: &ScoreVector, dataset: &Dataset, e: usize) -> Result<SubsetSpec> {
    let ids = ranked_pick(scores, dataset, e, false)?;
    Ok(SubsetSpec::new(scores.method.to_string(), ids, dataset, None))
}

/// The `E/C` lowest-scoring examples of each class; ties by ascending id.
pub fn select_bottom(scores: &ScoreVector, dataset: &Dataset, e: usize) -> Result<SubsetSpec> {
    let ids = ranked_pick(scores, dataset, e, true)?;
    Ok(SubsetSpec::new(format!("bottom-{}", scores.method), ids, dataset, None))
}

/// Union of the examples in the `n` highest-accuracy records, ties by
/// ascending record index.
pub fn select_topprompts(pool: &PromptPool, n: usize, dataset: &Dataset) -> Result<SubsetSpec> {
    if pool.is_empty() {
        return Err(Error::Selection("pool is empty".into()));
    }
    if n == 0 || n > pool.len() {
        return Err(Error::Selection(format!("n={n} outside 1..={}", pool.len())));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&pool.records[a], &pool.records[b]);
        rb.dev_accuracy.total_cmp(&ra.dev_accuracy).then(ra.index.cmp(&rb.index))
    });
    let ids: BTreeSet<ExampleId> = order[..n]
        .iter()
        .flat_map(|&r| pool.records[r].prompt.example_ids.iter().copied())
        .collect();
    Ok(SubsetSpec::new(format!("topprompts-{n}"), ids, dataset, None))
}

/// A seeded class-balanced uniform subset.
pub fn select_random(dataset: &Dataset, e: usize, seed: u64) -> Result<SubsetSpec> {
    let per = per_class(dataset, e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = BTreeSet::new();
    for c in 0..dataset.num_classes() {
        let mut members: Vec<ExampleId> = dataset.train.iter().filter(|x| x.label == c).map(|x| x.id).collect();
        if members.len() < per {
            return Err(Error::Selection(format!(
                "class {c} has only {} examples, {per} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        ids.extend(members.into_iter().take(per));
    }
    Ok(SubsetSpec::new("random", ids, dataset, Some(format!("seed={seed}"))))
}

/// The whole training split.
pub fn select_all(dataset: &Dataset) -> SubsetSpec {
    SubsetSpec::new("all", (0..dataset.train.len()).collect(), dataset, None)
}

/// Examples whose label is the gold one.
pub fn count_gold(subset: &SubsetSpec, dataset: &Dataset) -> Result<usize> {
    let mut n = 0;
    for &id in &subset.ids {
        let ex = dataset.example(Split::Train, id)?;
        match ex.gold {
            Some(true) => n += 1,
            Some(false) => {}
            None => return Err(Error::Unsupported(format!("example {id} carries no gold flag"))),
        }
    }
    Ok(n)
}

/// Relabels every non-gold subset member with its gold label. Ids stay the
/// same; the returned dataset carries the corrected labels.
pub fn correct_labels(subset: &SubsetSpec, dataset: &Dataset) -> Result<(SubsetSpec, Dataset)> {
    let gold_of: BTreeMap<ExampleId, usize> = dataset
        .train
        .iter()
        .filter(|x| x.gold == Some(true))
        .map(|x| (x.input_group(), x.label))
        .collect();
    let mut fixed = dataset.clone();
    for &id in &subset.ids {
        let ex = &mut fixed.train[id];
        match ex.gold {
            Some(true) => {}
            Some(false) => {
                ex.label = *gold_of.get(&ex.input_group()).ok_or_else(|| {
                    Error::Unsupported(format!("no gold copy for example {id}"))
                })?;
                ex.gold = Some(true);
            }
            None => return Err(Error::Unsupported(format!("example {id} carries no gold flag"))),
        }
    }
    let mut spec = SubsetSpec::new(
        format!("{}-corrected", subset.method),
        subset.ids.iter().copied().collect(),
        &fixed,
        subset.source.clone(),
    );
    spec.e = subset.e;
    Ok((spec, fixed))
}

/// Content-free class probabilities for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub q: Vec<f64>,
}

impl Calibrator {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Invalid(format!("calibration probabilities must be positive: {q:?}")));
        }
        Ok(Self { q })
    }

    pub fn uniform(c: usize) -> Self {
        Self {
            q: vec![1.0 / c as f64; c],
        }
    }
}

/// Mean softmax over the content-free probes rendered after `context`.
pub fn fit_calibrator(context: &[ExampleId], dataset: &Dataset, backend: &dyn Backend) -> Result<Calibrator> {
    let c = dataset.num_classes();
    let mut q = vec![0.0; c];
    for probe in CONTENT_FREE_PROBES {
        let rendered = dataset.render(context, &dataset.content_free_input(probe), None)?;
        let p = backend.score_labels(&rendered)?.probabilities();
        if p.len() != c {
            return Err(Error::Invalid(format!("backend returned {} scores for {c} classes", p.len())));
        }
        for (acc, x) in q.iter_mut().zip(p) {
            *acc += x / CONTENT_FREE_PROBES.len() as f64;
        }
    }
    Calibrator::new(q)
}

/// `argmax_y softmax(scores)[y] / q[y]`, ties to the lower class.
pub fn calibrated_predict(scores: &LabelScores, cal: &Calibrator) -> usize {
    let p = scores.probabilities();
    let mut best = 0;
    for y in 1..p.len() {
        if p[y] / cal.q[y] > p[best] / cal.q[best] {
            best = y;
        }
    }
    best
}

//! Subset characterization: length/perplexity profiles and diversity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::condacc::ScoreVector;
use crate::corpus::{Dataset, ExampleId, Split};
use crate::error::{Error, Result};
use crate::selection::{select_random, SubsetSpec};
use crate::stats::{hash_words, pearson, quartiles, Quartiles};

pub const DEFAULT_RANDOM_SUBSETS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleProfile {
    pub id: ExampleId,
    pub token_length: usize,
    pub perplexity: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub profiles: Vec<ExampleProfile>,
    /// `None` when either side has zero variance.
    pub r_length: Option<f64>,
    /// `None` also when the backend has no perplexities.
    pub r_perplexity: Option<f64>,
}

pub fn profile_examples(dataset: &Dataset, backend: &dyn Backend, scores: &ScoreVector) -> Result<ProfileReport> {
    if scores.len() != dataset.train.len() {
        return Err(Error::Invalid(format!(
            "scores cover {} examples, training split has {}",
            scores.len(),
            dataset.train.len()
        )));
    }
    let rows = dataset
        .train
        .par_iter()
        .map(|ex| {
            let text = dataset.template.render_input(&ex.input);
            let token_length = backend.count_tokens(&text)?;
            let perplexity = match backend.perplexity(&text) {
                Ok(p) => Some(p),
                Err(BackendError::Unsupported(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(ExampleProfile {
                id: ex.id,
                token_length,
                perplexity,
                score: scores.scores[ex.id],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = rows.iter().map(|p| p.score).collect();
    let len: Vec<f64> = rows.iter().map(|p| p.token_length as f64).collect();
    let ppl: Option<Vec<f64>> = rows.iter().map(|p| p.perplexity).collect();
    if ppl.is_none() {
        log::warn!("backend reports no perplexities; skipping that correlation");
    }
    Ok(ProfileReport {
        r_length: pearson(&len, &s),
        r_perplexity: ppl.and_then(|p| pearson(&p, &s)),
        profiles: rows,
    })
}

/// Scatter data as `id,length,perplexity,score`; missing perplexity is empty.
pub fn write_profiles_csv(report: &ProfileReport, path: &Path) -> Result<()> {
    let mut out = String::from("id,length,perplexity,score\n");
    for p in &report.profiles {
        let ppl = p.perplexity.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", p.id, p.token_length, ppl, p.score);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Distinct whitespace unigrams over total unigrams.
pub fn type_token_ratio<'a>(texts: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut types = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        for w in t.split_whitespace() {
            types.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    types.len() as f64 / total as f64
}

fn input_text(dataset: &Dataset, id: ExampleId) -> Result<String> {
    let ex = dataset.example(Split::Train, id)?;
    Ok(ex.input.values().cloned().collect::<Vec<_>>().join(" "))
}

/// Text diversity: type-token ratio over the subset's input fields.
pub fn div_i(ids: &[ExampleId], dataset: &Dataset) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Invalid("diversity of an empty subset".into()));
    }
    let texts = ids.iter().map(|&id| input_text(dataset, id)).collect::<Result<Vec<_>>>()?;
    Ok(type_token_ratio(texts.iter().map(String::as_str)))
}

pub type EmbeddingMap = BTreeMap<ExampleId, Vec<f64>>;

/// Feature diversity: mean pairwise Euclidean distance.
pub fn div_f(ids: &[ExampleId], embeddings: &EmbeddingMap) -> Result<f64> {
    let vs = ids
        .iter()
        .map(|id| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no embedding for example {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..vs.len() {
        for b in a + 1..vs.len() {
            if vs[a].len() != vs[b].len() {
                return Err(Error::Invalid("embeddings differ in dimension".into()));
            }
            sum += vs[a].iter().zip(vs[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityBaseline {
    pub n_random: usize,
    pub e: usize,
    pub seed: u64,
    pub div_i: Quartiles,
    pub div_f: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub method: String,
    pub div_i: f64,
    pub div_f: Option<f64>,
    pub baseline: DiversityBaseline,
}

/// Quartiles of both metrics over `n_random` seeded class-balanced subsets.
pub fn diversity_baseline(
    dataset: &Dataset,
    e: usize,
    n_random: usize,
    seed: u64,
    embeddings: Option<&EmbeddingMap>,
) -> Result<DiversityBaseline> {
    if n_random == 0 {
        return Err(Error::Invalid("n_random must be positive".into()));
    }
    let vals = (0..n_random)
        .into_par_iter()
        .map(|i| {
            let s = select_random(dataset, e, hash_words(seed, [i as u64]))?;
            let f = embeddings.map(|m| div_f(&s.ids, m)).transpose()?;
            Ok((div_i(&s.ids, dataset)?, f))
        })
        .collect::<Result<Vec<_>>>()?;
    let di: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let df: Option<Vec<f64>> = vals.iter().map(|v| v.1).collect();
    Ok(DiversityBaseline {
        n_random,
        e,
        seed,
        div_i: quartiles(&di).expect("n_random > 0"),
        div_f: df.and_then(|v| quartiles(&v)),
    })
}

pub fn diversity_report(
    subset: &SubsetSpec,
    dataset: &Dataset,
    embeddings: Option<&EmbeddingMap>,
    n_random: usize,
    seed: u64,
) -> Result<DiversityReport> {
    Ok(DiversityReport {
        method: subset.method.clone(),
        div_i: div_i(&subset.ids, dataset)?,
        div_f: embeddings.map(|m| div_f(&subset.ids, m)).transpose()?,
        baseline: diversity_baseline(dataset, subset.len(), n_random, seed, embeddings)?,
    })
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: ExampleId,
    #[serde(alias = "embedding")]
    vector: Vec<f64>,
}

/// Reads `{id, vector}` JSONL (`embedding` is accepted for `vector`).
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMap> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: EmbeddingLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.insert(l.id, l.vector);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::backend::{SyntheticBackend, SyntheticOracleSpec};
    use crate::condacc::ScoreMethod;
    use crate::testutil::dataset;

    #[test]
    fn ttr_cases() {
        assert_eq!(type_token_ratio(["a", "a", "a"]), 1.0 / 3.0);
        assert_eq!(type_token_ratio(["a b", "b c"]), 0.75);
        assert_eq!(type_token_ratio(["x y", "z"]), 1.0);
    }

    #[test]
    fn div_f_cases() {
        let m: EmbeddingMap = [(0, vec![0.0]), (1, vec![1.0]), (2, vec![2.0]), (3, vec![1.0])].into();
        assert_eq!(div_f(&[0, 1, 2], &m).unwrap(), 4.0 / 3.0);
        assert_eq!(div_f(&[1, 3], &m).unwrap(), 0.0);
        let err = div_f(&[0, 9], &m).unwrap_err();
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn baseline_single_subset_and_determinism() {
        let d = dataset(20, 4);
        let b = diversity_baseline(&d, 4, 1, 3, None).unwrap();
        let s = select_random(&d, 4, hash_words(3, [0])).unwrap();
        let v = div_i(&s.ids, &d).unwrap();
        assert_eq!((b.div_i.min, b.div_i.median, b.div_i.max), (v, v, v));
        assert_eq!(diversity_baseline(&d, 4, 50, 8, None).unwrap(), diversity_baseline(&d, 4, 50, 8, None).unwrap());
    }

    #[test]
    fn homogeneous_corpus_has_zero_width_baseline() {
        let mut d = dataset(10, 4);
        for ex in &mut d.train {
            ex.input.insert("text".into(), "same words".into());
        }
        let emb: EmbeddingMap = (0..10).map(|i| (i, vec![1.0, 2.0])).collect();
        let b = diversity_baseline(&d, 4, 20, 1, Some(&emb)).unwrap();
        assert_eq!(b.div_i.min, b.div_i.max);
        let f = b.div_f.unwrap();
        assert_eq!((f.min, f.max), (0.0, 0.0));
    }

    #[test]
    fn profiles_and_identical_text() {
        let mut d = dataset(10, 4);
        let backend = SyntheticBackend::new(SyntheticOracleSpec::constant(10, 4, 0.0));
        let scores = ScoreVector {
            method: ScoreMethod::Condacc,
            scores: (0..10).map(|i| i as f64).collect(),
            support: vec![1; 10],
        };
        let r = profile_examples(&d, &backend, &scores).unwrap();
        assert!(r.profiles.iter().all(|p| p.token_length >= 1 && p.perplexity.unwrap() > 0.0));
        for ex in &mut d.train {
            ex.input.insert("text".into(), "w1 w2".into());
        }
        let r = profile_examples(&d, &backend, &scores).unwrap();
        assert_eq!((r.r_length, r.r_perplexity), (None, None));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_profiles_csv(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,length,perplexity,score\n0,"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn embeddings_file_accepts_both_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "{\"id\":0,\"vector\":[1.0]}\n{\"id\":1,\"embedding\":[2.0],\"projection\":[0,0]}\n").unwrap();
        let m = load_embeddings(&p).unwrap();
        assert_eq!(m[&1], vec![2.0]);
    }

    proptest! {
        #[test]
        fn duplicating_never_raises_ttr(words in prop::collection::vec("[a-d]{1,2}( [a-d]{1,2}){0,3}", 1..6), pick in any::<prop::sample::Index>()) {
            let before = type_token_ratio(words.iter().map(String::as_str));
            let mut more = words.clone();
            more.push(words[pick.index(words.len())].clone());
            let after = type_token_ratio(more.iter().map(String::as_str));
            prop_assert!(after <= before);
            prop_assert!(before > 0.0 && before <= 1.0);
        }

        #[test]
        fn div_f_scales_and_translates(pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6), c in 0.1f64..4.0, t in -3.0f64..3.0) {
            let ids: Vec<usize> = (0..pts.len()).collect();
            let m: EmbeddingMap = pts.iter().cloned().enumerate().collect();
            let base = div_f(&ids, &m).unwrap();
            let scaled: EmbeddingMap = pts.iter().map(|v| v.iter().map(|x| x * c).collect()).enumerate().collect();
            let moved: EmbeddingMap = pts.iter().map(|v| v.iter().map(|x| x + t).collect()).enumerate().collect();
            prop_assert!((div_f(&ids, &scaled).unwrap() - c * base).abs() < 1e-9);
            prop_assert!((div_f(&ids, &moved).unwrap() - base).abs() < 1e-9);
        }
    }
}

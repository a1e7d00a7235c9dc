//! Run configuration, read from one TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, SyntheticOracleSpec};
use crate::corpus::{build_unlabeled, Dataset, DatasetDescriptor, SyntheticCorpus};
use crate::datamodels::{Aggregation, ScoreSets, SuiteConfig, DEFAULT_BUCKET_THRESHOLD, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_EVAL_PROMPTS;
use crate::pool::SamplingConfig;

/// Every sampling step has its own explicit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sampling: u64,
    pub heldout: u64,
    pub selection: u64,
    pub evaluation: u64,
    pub analysis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// A descriptor file (may name a preset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<PathBuf>,
    /// Or a built-in preset plus a data file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Or a generated toy corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticCorpus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Pair every input with every label.
    #[serde(default)]
    pub unlabeled: bool,
}

impl DatasetSection {
    pub fn descriptor(&self) -> Result<DatasetDescriptor> {
        let mut d = match (&self.descriptor, &self.preset, &self.synthetic) {
            (Some(p), None, None) => DatasetDescriptor::from_file(p)?,
            (None, Some(name), None) => {
                let mut d = DatasetDescriptor::preset(name)
                    .ok_or_else(|| Error::Config(format!("dataset.preset: unknown preset {name:?}")))?;
                d.source = Some(
                    self.source
                        .clone()
                        .ok_or_else(|| Error::Config("dataset.source is required with a preset".into()))?,
                );
                d
            }
            (None, None, Some(s)) => {
                let mut d = DatasetDescriptor::preset("sst2").expect("built-in preset");
                d.name = "synthetic".into();
                d.synthetic = Some(s.clone());
                d
            }
            _ => {
                return Err(Error::Config(
                    "dataset: set exactly one of descriptor, preset, synthetic".into(),
                ))
            }
        };
        if let Some(n) = &self.name {
            d.name = n.clone();
        }
        Ok(d)
    }

    pub fn load(&self) -> Result<Dataset> {
        let d = self.descriptor()?.load()?;
        if self.unlabeled {
            build_unlabeled(&d)
        } else {
            Ok(d)
        }
    }
}

/// Generates a random synthetic oracle sized to the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "one")]
    pub weight_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub query_offset_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl OracleSection {
    pub fn build(&self, n_train: usize, k: usize) -> SyntheticOracleSpec {
        let mut s = SyntheticOracleSpec::random(n_train, k, self.weight_scale, self.seed);
        s.true_bias = self.bias;
        s.noise_std = self.noise_std;
        s.query_offset_scale = self.query_offset_scale;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced: Option<bool>,
    #[serde(default = "default_min_occ")]
    pub min_occurrence: usize,
    #[serde(default = "yes")]
    pub topup: bool,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_fail_rate")]
    pub max_failure_rate: f64,
}

fn default_min_occ() -> usize {
    20
}
fn yes() -> bool {
    true
}
fn default_batch() -> usize {
    256
}
fn default_fail_rate() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatamodelsSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_threshold")]
    pub bucket_threshold: usize,
    /// Held-out prompts for the correlation/L1 check; 0 skips it.
    #[serde(default)]
    pub heldout: usize,
    #[serde(default)]
    pub sets: ScoreSets,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_threshold() -> usize {
    DEFAULT_BUCKET_THRESHOLD
}

impl Default for DatamodelsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: DEFAULT_LAMBDA,
            bucket_threshold: DEFAULT_BUCKET_THRESHOLD,
            heldout: 0,
            sets: ScoreSets::default(),
            aggregation: Aggregation::default(),
        }
    }
}

impl DatamodelsSection {
    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            lambda: self.lambda,
            bucket_threshold: self.bucket_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(rename = "E", alias = "e")]
    pub e: usize,
    /// Any of condacc, shapley, datamodels, oneshot, random, topprompts, all.
    pub methods: Vec<String>,
    /// Score methods whose lowest-scoring subset is also selected.
    #[serde(default)]
    pub bottom: Vec<String>,
    #[serde(default = "default_topprompts")]
    pub topprompts_n: usize,
}

fn default_topprompts() -> usize {
    5
}

pub const SCORE_METHODS: [&str; 4] = ["condacc", "shapley", "datamodels", "oneshot"];
pub const BASELINE_METHODS: [&str; 3] = ["random", "topprompts", "all"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Any of standard, calibrated, single-label, ood, maxshot.
    pub protocols: Vec<String>,
    #[serde(default = "default_eval_prompts")]
    pub n_prompts: usize,
    #[serde(default = "yes")]
    pub min_one_per_class: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    /// Target dataset for the ood protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_target: Option<DatasetSection>,
}

fn default_eval_prompts() -> usize {
    DEFAULT_EVAL_PROMPTS
}

pub const PROTOCOLS: [&str; 5] = ["standard", "calibrated", "single-label", "ood", "maxshot"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "yes")]
    pub profile: bool,
    #[serde(default = "yes")]
    pub diversity: bool,
    #[serde(default = "default_n_random")]
    pub n_random: usize,
    /// JSONL embeddings for the feature diversity; defaults to datamodel
    /// embeddings when datamodels are enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

fn default_n_random() -> usize {
    crate::analysis::DEFAULT_RANDOM_SUBSETS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<String>>,
    pub seeds: Seeds,
    pub dataset: DatasetSection,
    pub backend: BackendDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    pub pool: PoolSection,
    #[serde(default)]
    pub datamodels: DatamodelsSection,
    pub selection: SelectionSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSection>,
}

pub const STAGES: [&str; 6] = ["collect", "heldout", "score", "select", "eval", "analyze"];

impl RunConfig {
    /// Parses and validates; relative paths resolve against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate_static()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate_static()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_ds = |d: &mut DatasetSection| {
            for p in [&mut d.descriptor, &mut d.source].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix_ds(&mut self.dataset);
        if let Some(ood) = self.evaluation.as_mut().and_then(|e| e.ood_target.as_mut()) {
            fix_ds(ood);
        }
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.analysis.as_mut().and_then(|a| a.embeddings.as_mut()) {
            fix(p);
        }
        match &mut self.backend {
            BackendDescriptor::Remote { record: Some(p), .. } => fix(p),
            BackendDescriptor::Replay { path, .. } => fix(path),
            BackendDescriptor::Synthetic { spec_path: Some(p), .. } => fix(p),
            _ => {}
        }
    }

    /// Checks that need no data or backend.
    fn validate_static(&self) -> Result<()> {
        if let Some(stages) = &self.stages {
            for s in stages {
                if !STAGES.contains(&s.as_str()) {
                    return Err(Error::Config(format!("stages: unknown stage {s:?}")));
                }
            }
        }
        for m in &self.selection.methods {
            if !SCORE_METHODS.contains(&m.as_str()) && !BASELINE_METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("selection.methods: unknown method {m:?}")));
            }
        }
        for m in &self.selection.bottom {
            if !SCORE_METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("selection.bottom: {m:?} is not a score method")));
            }
        }
        let needs_dm = self.selection.methods.iter().chain(&self.selection.bottom).any(|m| m == "datamodels");
        if needs_dm && !self.datamodels.enabled {
            return Err(Error::Config("selection uses datamodels but datamodels.enabled = false".into()));
        }
        if let Some(ev) = &self.evaluation {
            for p in &ev.protocols {
                if !PROTOCOLS.contains(&p.as_str()) {
                    return Err(Error::Config(format!("evaluation.protocols: unknown protocol {p:?}")));
                }
            }
            if ev.protocols.iter().any(|p| p == "ood") && ev.ood_target.is_none() {
                return Err(Error::Config("evaluation.ood_target is required for the ood protocol".into()));
            }
            if ev.protocols.iter().any(|p| p == "maxshot") && ev.k_max.is_none() {
                return Err(Error::Config("evaluation.k_max is required for the maxshot protocol".into()));
            }
        }
        if self.datamodels.lambda.is_nan() || self.datamodels.lambda <= 0.0 {
            return Err(Error::Config("datamodels.lambda must be > 0".into()));
        }
        if let BackendDescriptor::Synthetic { spec: None, spec_path: None } = &self.backend {
            if self.oracle.is_none() {
                return Err(Error::Config("synthetic backend needs spec, spec_path, or an [oracle] section".into()));
            }
        }
        Ok(())
    }

    /// Checks against the loaded dataset, before any backend call.
    pub fn validate_with(&self, dataset: &Dataset) -> Result<()> {
        let c = dataset.num_classes();
        let e = self.selection.e;
        if e == 0 || !e.is_multiple_of(c) {
            return Err(Error::Config(format!("selection.E = {e} is not a positive multiple of {c} classes")));
        }
        let k = self.k(dataset);
        if k == 0 || k > dataset.train.len() {
            return Err(Error::Config(format!("pool.k = {k} outside 1..={}", dataset.train.len())));
        }
        if let Some(ev) = &self.evaluation {
            if let Some(km) = ev.k_max {
                if km % c != 0 {
                    return Err(Error::Config(format!("evaluation.k_max = {km} is not a multiple of {c}")));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self, dataset: &Dataset) -> usize {
        self.pool.k.unwrap_or(dataset.k)
    }

    pub fn sampling(&self, dataset: &Dataset) -> SamplingConfig {
        let mut s = SamplingConfig::new(
            self.k(dataset),
            self.pool.m,
            self.pool.balanced.unwrap_or(dataset.balanced),
            self.seeds.sampling,
        );
        s.min_occurrence = self.pool.min_occurrence;
        s.topup = self.pool.topup;
        s
    }

    pub fn stage_enabled(&self, stage: &str) -> bool {
        self.stages.as_ref().is_none_or(|s| s.iter().any(|x| x == stage))
    }

    /// The backend descriptor with any `[oracle]` generator resolved.
    pub fn resolved_backend(&self, dataset: &Dataset) -> BackendDescriptor {
        match (&self.backend, &self.oracle) {
            (BackendDescriptor::Synthetic { spec: None, spec_path: None }, Some(o)) => BackendDescriptor::Synthetic {
                spec_path: None,
                spec: Some(Box::new(o.build(dataset.train.len(), self.k(dataset).max(self.evaluation.as_ref().and_then(|e| e.k_max).unwrap_or(0))))),
            },
            (b, _) => b.clone(),
        }
    }
}

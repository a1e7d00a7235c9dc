//! Staged runs. Every stage declares its inputs and outputs, and is skipped
//! when its marker records the same configuration hash.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{RunConfig, SCORE_METHODS, STAGES};
use super::manifest::{canonical_json, sha256_hex, RunManifest, StageEntry, StageMarker, StageStatus};
use crate::analysis::{
    div_f, div_i, diversity_baseline, load_embeddings, profile_examples, write_profiles_csv, DiversityReport, EmbeddingMap,
};
use crate::backend::{Backend, BackendDescriptor};
use crate::condacc::{condacc_scores, oneshot_scores, shapley_scores, ScoreVector};
use crate::corpus::Dataset;
use crate::datamodels::{
    datamodels_scores, export_embeddings, fit_suite, heldout_eval, save_embeddings, save_suite, Routing,
    ScoreOptions,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_maxshot, evaluate_ood, evaluate_single_label, evaluate_subset, EvalConfig};
use crate::pool::{collect, sample_heldout_pool, sample_pool, CollectOptions, PoolManifest, PromptPool, SamplingConfig};
use crate::selection::{select_all, select_bottom, select_random, select_top, select_topprompts, SubsetSpec};

const POOL_DIR: &str = "pool";
const HELDOUT_DIR: &str = "heldout";
const SUITE_DIR: &str = "datamodels/suite";
const HELDOUT_REPORT: &str = "datamodels/heldout_report.json";
const EMBEDDINGS: &str = "datamodels/embeddings.jsonl";
const MARKER_DIR: &str = "stages";

#[derive(Default)]
pub struct RunOptions {
    /// Rerun stages even when their hash matches.
    pub force: bool,
    /// Use this backend instead of building one from the config.
    pub backend: Option<Arc<dyn Backend>>,
}

/// Name, hash key, upstream stages, inputs, outputs, applicable.
type StageSpec = (&'static str, Value, Vec<&'static str>, Vec<String>, Vec<String>, bool);

struct Plan {
    hash: String,
    upstream: Vec<&'static str>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    applicable: bool,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    dataset: Dataset,
    descriptor: BackendDescriptor,
    backend: OnceCell<Arc<dyn Backend>>,
    plans: BTreeMap<&'static str, Plan>,
}

/// Runs every enabled stage of `cfg` into `out_dir`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    run_pipeline_with(cfg, out_dir, RunOptions::default())
}

pub fn run_pipeline_with(cfg: &RunConfig, out_dir: &Path, opts: RunOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let dataset = cfg.dataset.load()?;
    cfg.validate_with(&dataset)?;
    if let Some(ood) = cfg.evaluation.as_ref().and_then(|e| e.ood_target.as_ref()) {
        let target = ood.load()?;
        if target.classes != dataset.classes || target.fields != dataset.fields {
            return Err(Error::Config(
                "evaluation.ood_target must share classes and input fields with the dataset".into(),
            ));
        }
    }
    fs::create_dir_all(out_dir.join(MARKER_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let descriptor = cfg.resolved_backend(&dataset);
    let mut run = Run {
        cfg,
        out: out_dir.to_path_buf(),
        dataset,
        descriptor,
        backend: OnceCell::new(),
        plans: BTreeMap::new(),
    };
    if let Some(b) = opts.backend {
        let _ = run.backend.set(b);
    }
    run.plan()?;

    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: sha256_hex(&canonical_json(cfg)?),
        backend: run.descriptor.identity(),
        model: None,
        seeds: cfg.seeds,
        out_dir: out_dir.display().to_string(),
        stages: Vec::new(),
        wall_clock_secs: 0.0,
    };
    for &stage in STAGES.iter() {
        let plan = &run.plans[stage];
        if !plan.applicable || !cfg.stage_enabled(stage) {
            continue;
        }
        let t = Instant::now();
        let mut entry = StageEntry {
            stage: stage.to_string(),
            hash: plan.hash.clone(),
            status: StageStatus::Ran,
            inputs: plan.inputs.clone(),
            outputs: plan.outputs.clone(),
            wall_clock_secs: 0.0,
            error: None,
        };
        let res = run.execute(stage, opts.force);
        entry.wall_clock_secs = t.elapsed().as_secs_f64();
        match res {
            Ok(cached) => {
                if cached {
                    entry.status = StageStatus::Cached;
                    log::info!("{stage}: cached ({})", &plan.hash[..12]);
                } else {
                    log::info!("{stage}: done in {:.2}s", entry.wall_clock_secs);
                }
                manifest.stages.push(entry);
            }
            Err(e) => {
                entry.status = StageStatus::Failed;
                entry.error = Some(e.to_string());
                manifest.stages.push(entry);
                manifest.model = run.backend.get().map(|b| b.model_id().to_string());
                manifest.wall_clock_secs = started.elapsed().as_secs_f64();
                manifest.save(out_dir)?;
                return Err(e);
            }
        }
    }
    manifest.model = run.backend.get().map(|b| b.model_id().to_string());
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn pool_files(dir: &str) -> Vec<String> {
    vec![format!("{dir}/manifest.json"), format!("{dir}/records.jsonl")]
}

fn score_file(method: &str) -> String {
    format!("scores/{method}.jsonl")
}

fn subset_file(name: &str) -> String {
    format!("subsets/{name}.json")
}

impl Run<'_> {
    fn backend(&self) -> Result<&dyn Backend> {
        if let Some(b) = self.backend.get() {
            return Ok(b.as_ref());
        }
        let b: Arc<dyn Backend> = Arc::from(self.descriptor.build()?);
        Ok(self.backend.get_or_init(|| b).as_ref())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn heldout_enabled(&self) -> bool {
        self.cfg.datamodels.enabled && self.cfg.datamodels.heldout > 0
    }

    fn score_methods(&self) -> Vec<&'static str> {
        let sel = &self.cfg.selection;
        SCORE_METHODS
            .into_iter()
            .filter(|&m| match m {
                "condacc" | "shapley" => true,
                "datamodels" => self.cfg.datamodels.enabled,
                _ => sel.methods.iter().chain(&sel.bottom).any(|x| x == m),
            })
            .collect()
    }

    /// Subset names in selection order; file stems under `subsets/`.
    fn subset_names(&self) -> Vec<String> {
        let sel = &self.cfg.selection;
        sel.methods
            .iter()
            .cloned()
            .chain(sel.bottom.iter().map(|m| format!("bottom-{m}")))
            .collect()
    }

    fn report_files(&self) -> Vec<String> {
        let Some(ev) = &self.cfg.evaluation else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for s in self.subset_names() {
            for p in &ev.protocols {
                match p.as_str() {
                    "maxshot" => {}
                    "single-label" => {
                        for c in 0..self.dataset.num_classes() {
                            out.push(format!("reports/{s}__single-label-{c}.json"));
                        }
                    }
                    _ => out.push(format!("reports/{s}__{p}.json")),
                }
            }
        }
        if ev.protocols.iter().any(|p| p == "maxshot") {
            out.push("reports/maxshot.json".into());
        }
        out
    }

    fn embeddings_input(&self) -> Option<String> {
        let an = self.cfg.analysis.as_ref()?;
        match &an.embeddings {
            Some(p) => Some(p.display().to_string()),
            None if self.cfg.datamodels.enabled => Some(EMBEDDINGS.into()),
            None => None,
        }
    }

    fn plan(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let sampling = cfg.sampling(&self.dataset);
        let dataset_hash = sha256_hex(&canonical_json(&self.dataset)?);
        let mut specs: Vec<StageSpec> = Vec::new();

        specs.push((
            "collect",
            json!({"dataset": dataset_hash, "backend": self.descriptor, "sampling": sampling,
                   "batch": cfg.pool.batch, "max_failure_rate": cfg.pool.max_failure_rate}),
            vec![],
            vec![],
            pool_files(POOL_DIR),
            true,
        ));
        specs.push((
            "heldout",
            json!({"n": cfg.datamodels.heldout, "seed": cfg.seeds.heldout}),
            vec!["collect"],
            pool_files(POOL_DIR),
            pool_files(HELDOUT_DIR),
            self.heldout_enabled(),
        ));

        let methods = self.score_methods();
        let mut score_in = pool_files(POOL_DIR);
        let mut score_up = vec!["collect"];
        if self.heldout_enabled() {
            score_in.extend(pool_files(HELDOUT_DIR));
            score_up.push("heldout");
        }
        let mut score_out: Vec<String> = methods.iter().map(|m| score_file(m)).collect();
        if cfg.datamodels.enabled {
            score_out.push(format!("{SUITE_DIR}/config.json"));
            score_out.push(EMBEDDINGS.into());
            if self.heldout_enabled() {
                score_out.push(HELDOUT_REPORT.into());
            }
        }
        specs.push((
            "score",
            json!({"methods": methods, "datamodels": cfg.datamodels}),
            score_up,
            score_in,
            score_out,
            true,
        ));

        let mut select_in: Vec<String> = Vec::new();
        for m in cfg.selection.methods.iter().chain(&cfg.selection.bottom) {
            if SCORE_METHODS.contains(&m.as_str()) {
                select_in.push(score_file(m));
            } else if m == "topprompts" {
                select_in.extend(pool_files(POOL_DIR));
            }
        }
        select_in.sort();
        select_in.dedup();
        specs.push((
            "select",
            json!({"selection": cfg.selection, "seed": cfg.seeds.selection}),
            vec!["collect", "score"],
            select_in,
            self.subset_names().iter().map(|s| subset_file(s)).collect(),
            true,
        ));

        let subset_files: Vec<String> = self.subset_names().iter().map(|s| subset_file(s)).collect();
        specs.push((
            "eval",
            json!({"evaluation": cfg.evaluation, "seed": cfg.seeds.evaluation, "k": cfg.k(&self.dataset)}),
            vec!["select"],
            subset_files.clone(),
            self.report_files(),
            cfg.evaluation.is_some(),
        ));

        let mut an_out = Vec::new();
        let mut an_in = Vec::new();
        if let Some(an) = &cfg.analysis {
            if an.profile {
                for m in &methods {
                    an_in.push(score_file(m));
                    an_out.push(format!("analysis/profile_{m}.csv"));
                    an_out.push(format!("analysis/profile_{m}.json"));
                }
            }
            if an.diversity {
                an_in.extend(subset_files.iter().cloned());
                an_in.extend(self.embeddings_input());
                for s in self.subset_names().iter().filter(|s| *s != "all") {
                    an_out.push(format!("analysis/diversity_{s}.json"));
                }
            }
        }
        specs.push((
            "analyze",
            json!({"analysis": cfg.analysis, "seed": cfg.seeds.analysis, "inputs": an_in}),
            vec!["score", "select"],
            an_in,
            an_out,
            cfg.analysis.is_some(),
        ));

        for (name, key, upstream, inputs, outputs, applicable) in specs {
            let up: BTreeMap<&str, &str> = upstream
                .iter()
                .filter(|u| self.plans[**u].applicable)
                .map(|u| (*u, self.plans[*u].hash.as_str()))
                .collect();
            let hash = sha256_hex(&canonical_json(&json!({"stage": name, "key": key, "upstream": up}))?);
            self.plans.insert(
                name,
                Plan {
                    hash,
                    upstream,
                    inputs,
                    outputs,
                    applicable,
                },
            );
        }
        Ok(())
    }

    fn marker_path(&self, stage: &str) -> PathBuf {
        self.out.join(MARKER_DIR).join(format!("{stage}.json"))
    }

    fn read_marker(&self, stage: &str) -> Option<StageMarker> {
        let text = fs::read_to_string(self.marker_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn up_to_date(&self, stage: &str) -> bool {
        let plan = &self.plans[stage];
        self.read_marker(stage).is_some_and(|m| {
            m.hash == plan.hash && plan.outputs.iter().all(|o| self.path(o).exists())
        })
    }

    /// Returns whether the stage was served from cache.
    fn execute(&self, stage: &'static str, force: bool) -> Result<bool> {
        let plan = &self.plans[stage];
        for u in &plan.upstream {
            if self.plans[u].applicable && !self.up_to_date(u) {
                return Err(Error::Config(format!(
                    "stage {stage} needs up-to-date outputs of stage {u}; run it first"
                )));
            }
        }
        if !force && self.up_to_date(stage) {
            return Ok(true);
        }
        let marker = self.marker_path(stage);
        if let Some(old) = self.read_marker(stage) {
            // Stale outputs; pool directories are cleared so collection
            // does not resume a different configuration.
            for dir in [POOL_DIR, HELDOUT_DIR] {
                if old.outputs.iter().any(|o| o.starts_with(&format!("{dir}/"))) {
                    let _ = fs::remove_dir_all(self.path(dir));
                }
            }
        } else if force {
            for dir in [POOL_DIR, HELDOUT_DIR] {
                if plan.outputs.iter().any(|o| o.starts_with(&format!("{dir}/"))) {
                    let _ = fs::remove_dir_all(self.path(dir));
                }
            }
        }
        let _ = fs::remove_file(&marker);
        match stage {
            "collect" => self.collect_stage()?,
            "heldout" => self.heldout_stage()?,
            "score" => self.score_stage()?,
            "select" => self.select_stage()?,
            "eval" => self.eval_stage()?,
            "analyze" => self.analyze_stage()?,
            _ => unreachable!("unknown stage {stage}"),
        }
        for o in &plan.outputs {
            if !self.path(o).exists() {
                return Err(Error::Invalid(format!("stage {stage} did not write {o}")));
            }
        }
        let m = StageMarker {
            stage: stage.to_string(),
            hash: plan.hash.clone(),
            outputs: plan.outputs.clone(),
        };
        write_json(&marker, &m)?;
        Ok(false)
    }

    fn collect_options(&self, dir: &str) -> CollectOptions {
        CollectOptions {
            out_dir: Some(self.path(dir)),
            batch: self.cfg.pool.batch,
            max_failure_rate: self.cfg.pool.max_failure_rate,
        }
    }

    fn collect_stage(&self) -> Result<()> {
        let ds = &self.dataset;
        let sampling = self.cfg.sampling(ds);
        let prompts = sample_pool(ds, &sampling)?;
        let backend = self.backend()?;
        match ds.validate_verbalizers(backend) {
            Err(e @ Error::Verbalizer { .. }) => return Err(e),
            Err(e) => log::warn!("verbalizer check skipped: {e}"),
            Ok(()) => {}
        }
        let manifest = PoolManifest::new(ds, &sampling, prompts.len(), &self.descriptor.identity(), backend.model_id());
        collect(&prompts, ds, backend, manifest, &self.collect_options(POOL_DIR))?;
        Ok(())
    }

    fn heldout_stage(&self) -> Result<()> {
        let ds = &self.dataset;
        let pool = PromptPool::load(&self.path(POOL_DIR))?;
        let n = self.cfg.datamodels.heldout;
        let seed = self.cfg.seeds.heldout;
        let prompts = sample_heldout_pool(ds, pool.k(), n, &pool, seed)?;
        let sampling = SamplingConfig {
            m: n,
            seed,
            min_occurrence: 0,
            topup: false,
            ..pool.manifest.sampling.clone()
        };
        let backend = self.backend()?;
        let manifest = PoolManifest::new(ds, &sampling, prompts.len(), &self.descriptor.identity(), backend.model_id());
        collect(&prompts, ds, backend, manifest, &self.collect_options(HELDOUT_DIR))?;
        Ok(())
    }

    fn score_stage(&self) -> Result<()> {
        let pool = PromptPool::load(&self.path(POOL_DIR))?;
        fs::create_dir_all(self.path("scores")).map_err(|e| Error::io(self.path("scores"), e))?;
        let ca = condacc_scores(&pool)?;
        ca.save(&self.path(&score_file("condacc")))?;
        shapley_scores(&ca, &pool)?.save(&self.path(&score_file("shapley")))?;
        let dm = &self.cfg.datamodels;
        if dm.enabled {
            let suite = fit_suite(&pool, dm.suite_config())?;
            save_suite(&suite, &self.path(SUITE_DIR))?;
            let opts = ScoreOptions {
                sets: dm.sets,
                aggregation: dm.aggregation,
            };
            datamodels_scores(&suite, opts).save(&self.path(&score_file("datamodels")))?;
            save_embeddings(&export_embeddings(&suite), &self.path(EMBEDDINGS))?;
            if self.heldout_enabled() {
                let heldout = PromptPool::load(&self.path(HELDOUT_DIR))?;
                let report = json!({
                    "bucketed": heldout_eval(&suite, &heldout, Routing::Bucketed)?,
                    "phase1_only": heldout_eval(&suite, &heldout, Routing::Phase1Only)?,
                });
                write_json(&self.path(HELDOUT_REPORT), &report)?;
            }
        }
        if self.score_methods().contains(&"oneshot") {
            oneshot_scores(&self.dataset, self.backend()?)?.save(&self.path(&score_file("oneshot")))?;
        }
        Ok(())
    }

    fn select_stage(&self) -> Result<()> {
        let ds = &self.dataset;
        let sel = &self.cfg.selection;
        fs::create_dir_all(self.path("subsets")).map_err(|e| Error::io(self.path("subsets"), e))?;
        let load = |m: &str| ScoreVector::load(&self.path(&score_file(m)));
        for m in &sel.methods {
            let subset = match m.as_str() {
                "random" => select_random(ds, sel.e, self.cfg.seeds.selection)?,
                "all" => select_all(ds),
                "topprompts" => {
                    let pool = PromptPool::load(&self.path(POOL_DIR))?;
                    select_topprompts(&pool, sel.topprompts_n, ds)?
                }
                score => select_top(&load(score)?, ds, sel.e)?,
            };
            subset.save(&self.path(&subset_file(m)))?;
        }
        for m in &sel.bottom {
            select_bottom(&load(m)?, ds, sel.e)?.save(&self.path(&subset_file(&format!("bottom-{m}"))))?;
        }
        Ok(())
    }

    fn eval_stage(&self) -> Result<()> {
        let ev = self.cfg.evaluation.as_ref().expect("applicable");
        let ds = &self.dataset;
        let backend = self.backend()?;
        fs::create_dir_all(self.path("reports")).map_err(|e| Error::io(self.path("reports"), e))?;
        let base = EvalConfig {
            n_prompts: ev.n_prompts,
            min_one_per_class: ev.min_one_per_class,
            ..EvalConfig::new(self.cfg.k(ds), self.cfg.seeds.evaluation)
        };
        let target = ev.ood_target.as_ref().map(|t| t.load()).transpose()?;
        for s in self.subset_names() {
            let subset = SubsetSpec::load(&self.path(&subset_file(&s)))?;
            for p in &ev.protocols {
                let file = |suffix: &str| self.path(&format!("reports/{s}__{suffix}.json"));
                match p.as_str() {
                    "standard" => evaluate_subset(&subset, ds, backend, &base)?.save(&file(p))?,
                    "calibrated" => {
                        let cfg = EvalConfig {
                            calibrate: true,
                            ..base.clone()
                        };
                        evaluate_subset(&subset, ds, backend, &cfg)?.save(&file(p))?
                    }
                    "single-label" => {
                        for (c, r) in evaluate_single_label(&subset, ds, backend, &base)? {
                            r.save(&file(&format!("single-label-{c}")))?;
                        }
                    }
                    "ood" => {
                        let t = target.as_ref().expect("validated");
                        evaluate_ood(&subset, ds, t, backend, &base)?.save(&file(p))?
                    }
                    _ => {}
                }
            }
        }
        if let Some(k_max) = ev.k_max.filter(|_| ev.protocols.iter().any(|p| p == "maxshot")) {
            evaluate_maxshot(ds, backend, k_max, ev.n_prompts, self.cfg.seeds.evaluation)?
                .save(&self.path("reports/maxshot.json"))?;
        }
        Ok(())
    }

    fn analyze_stage(&self) -> Result<()> {
        let an = self.cfg.analysis.as_ref().expect("applicable");
        let ds = &self.dataset;
        fs::create_dir_all(self.path("analysis")).map_err(|e| Error::io(self.path("analysis"), e))?;
        if an.profile {
            let backend = self.backend()?;
            for m in self.score_methods() {
                let scores = ScoreVector::load(&self.path(&score_file(m)))?;
                let report = profile_examples(ds, backend, &scores)?;
                write_profiles_csv(&report, &self.path(&format!("analysis/profile_{m}.csv")))?;
                write_json(&self.path(&format!("analysis/profile_{m}.json")), &report)?;
            }
        }
        if an.diversity {
            let emb: Option<EmbeddingMap> = self
                .embeddings_input()
                .map(|p| load_embeddings(&self.out.join(p)))
                .transpose()?;
            let baseline = diversity_baseline(ds, self.cfg.selection.e, an.n_random, self.cfg.seeds.analysis, emb.as_ref())?;
            for s in self.subset_names().into_iter().filter(|s| s != "all") {
                let subset = SubsetSpec::load(&self.path(&subset_file(&s)))?;
                let report = DiversityReport {
                    method: subset.method.clone(),
                    div_i: div_i(&subset.ids, ds)?,
                    div_f: emb.as_ref().map(|m| div_f(&subset.ids, m)).transpose()?,
                    baseline: baseline.clone(),
                };
                write_json(&self.path(&format!("analysis/diversity_{s}.json")), &report)?;
            }
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

//! Classification corpora: dataset descriptors, split sampling, templates,
//! the unlabeled expansion, and prompt rendering.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};

pub type ExampleId = usize;

/// Named input fields of one example, e.g. `{"passage": .., "question": ..}`.
pub type Input = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: ExampleId,
    pub input: Input,
    pub label: usize,
    /// Whether `label` is the gold label. `None` when unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<bool>,
    /// For unlabeled copies: id of the labeled example this was expanded from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<ExampleId>,
}

impl TrainingExample {
    /// Key identifying the underlying input; copies of one input share it.
    pub fn input_group(&self) -> ExampleId {
        self.origin.unwrap_or(self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Identity of the query being answered. Remote backends ignore it; the
/// synthetic oracle uses it to look up the gold label and query offset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryRef {
    pub dataset: String,
    pub split: Split,
    pub id: ExampleId,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Verbalizers as they would continue `text`, including any leading
    /// whitespace that the template puts before the label slot.
    pub label_candidates: Vec<String>,
    /// Training example ids of the in-context examples, in order.
    pub context: Vec<ExampleId>,
    pub query: Option<QueryRef>,
}

/// Prompt template with `{field}` placeholders and one `{label}` slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Template {
    text: String,
}

const LABEL_SLOT: &str = "{label}";

impl Template {
    pub fn new(text: impl Into<String>, fields: &[String]) -> Result<Self> {
        let text = text.into();
        if text.matches(LABEL_SLOT).count() != 1 {
            return Err(Error::Config(format!(
                "template must contain exactly one {LABEL_SLOT} slot: {text:?}"
            )));
        }
        for f in fields {
            if !text.contains(&format!("{{{f}}}")) {
                return Err(Error::Config(format!(
                    "template does not reference field {{{f}}}"
                )));
            }
        }
        Ok(Self { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    fn fill(segment: &str, input: &Input, out: &mut String) {
        let mut rest = segment;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) if input.contains_key(&after[..end]) => {
                    out.push_str(&input[&after[..end]]);
                    rest = &after[end + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
    }

    fn halves(&self) -> (&str, &str) {
        let at = self.text.find(LABEL_SLOT).expect("validated in Template::new");
        (&self.text[..at], &self.text[at + LABEL_SLOT.len()..])
    }

    /// A labeled demonstration.
    pub fn render_example(&self, input: &Input, verbalizer: &str) -> String {
        let (head, tail) = self.halves();
        let mut out = String::new();
        Self::fill(head, input, &mut out);
        out.push_str(verbalizer);
        Self::fill(tail, input, &mut out);
        out
    }

    /// The query stub with the label slot left empty. Returns the stub with
    /// trailing whitespace removed, and that whitespace (which belongs to the
    /// label candidates).
    pub fn render_stub(&self, input: &Input) -> (String, String) {
        let (head, _) = self.halves();
        let mut out = String::new();
        Self::fill(head, input, &mut out);
        let trimmed = out.trim_end().len();
        let ws = out[trimmed..].to_string();
        out.truncate(trimmed);
        (out, ws)
    }

    /// Only the input part of the template, without the label line.
    pub fn render_input(&self, input: &Input) -> String {
        self.render_stub(input).0
    }
}

/// Seeded synthetic corpus parameters, for desk-scale runs and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub n_train: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_synth_dev")]
    pub dev_per_class: usize,
    #[serde(default = "default_synth_test")]
    pub test_per_class: usize,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}
fn default_synth_dev() -> usize {
    10
}
fn default_synth_test() -> usize {
    50
}
fn default_min_words() -> usize {
    3
}
fn default_max_words() -> usize {
    12
}
fn default_vocab() -> usize {
    200
}

impl SyntheticCorpus {
    pub fn new(n_train: usize, classes: usize, seed: u64) -> Self {
        Self {
            n_train,
            classes,
            dev_per_class: default_synth_dev(),
            test_per_class: default_synth_test(),
            min_words: default_min_words(),
            max_words: default_max_words(),
            vocab: default_vocab(),
            seed,
        }
    }
}

/// Describes a task: template, verbalizers, shot count, and where examples
/// come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub template: String,
    pub verbalizers: Vec<String>,
    pub fields: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub balanced: bool,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_source: Option<PathBuf>,
    #[serde(default = "default_split_size")]
    pub train_size: usize,
    #[serde(default = "default_split_size")]
    pub test_size: usize,
    #[serde(default = "default_dev_per_class")]
    pub dev_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_labeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_unlabeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticCorpus>,
}

fn default_k() -> usize {
    4
}
fn default_separator() -> String {
    "\n\n".to_string()
}
fn default_split_size() -> usize {
    1000
}
fn default_dev_per_class() -> usize {
    50
}

impl DatasetDescriptor {
    #[allow(clippy::too_many_arguments)]
    fn task(
        name: &str,
        template: &str,
        verbalizers: &[&str],
        fields: &[&str],
        k: usize,
        balanced: bool,
        train_size: usize,
        m: (usize, usize),
    ) -> Self {
        Self {
            name: name.to_string(),
            template: template.to_string(),
            verbalizers: verbalizers.iter().map(|s| s.to_string()).collect(),
            fields: fields.iter().map(|s| s.to_string()).collect(),
            k,
            balanced,
            separator: default_separator(),
            source: None,
            test_source: None,
            train_size,
            test_size: default_split_size(),
            dev_per_class: default_dev_per_class(),
            seed: 0,
            m_labeled: Some(m.0),
            m_unlabeled: Some(m.1),
            synthetic: None,
        }
    }

    /// Built-in task setups. The returned descriptor has no `source`; set it
    /// before calling [`load_dataset`].
    pub fn preset(name: &str) -> Option<Self> {
        let d = match name.to_ascii_lowercase().replace('-', "").as_str() {
            "sst2" => Self::task(
                "sst2",
                "Review: {sentence}\nSentiment: {label}",
                &["negative", "positive"],
                &["sentence"],
                4,
                false,
                1000,
                (100_000, 50_000),
            ),
            "boolq" => Self::task(
                "boolq",
                "Exercise: read the text and answer the question by yes or no.\n\n{passage}\nQuestion: {question}? {label}",
                &["no", "yes"],
                &["passage", "question"],
                4,
                false,
                1000,
                (100_000, 50_000),
            ),
            "subj" => Self::task(
                "subj",
                "Input: {text}\nType: {label}",
                &["objective", "subjective"],
                &["text"],
                4,
                false,
                1000,
                (100_000, 50_000),
            ),
            "scicite" => Self::task(
                "scicite",
                "Is the following citation from a scientific paper describing a method, a result, or background?\n{string}\nAnswer: {label}",
                &["method", "result", "background"],
                &["string"],
                3,
                true,
                999,
                (40_000, 50_000),
            ),
            "agnews" => Self::task(
                "agnews",
                "Article: {text}\nAnswer: {label}",
                &["World", "Sports", "Business", "Technology"],
                &["text"],
                4,
                true,
                1000,
                (40_000, 50_000),
            ),
            "mnli" => Self::task(
                "mnli",
                "{premise} Based on the previous passage, is it true that \"{hypothesis}\"? Yes, no, or maybe? {label}",
                &["yes", "maybe", "no"],
                &["premise", "hypothesis"],
                3,
                true,
                999,
                (40_000, 50_000),
            ),
            _ => return None,
        };
        Some(d)
    }

    /// Reads a TOML descriptor. Relative `source`/`test_source` paths are
    /// resolved against the descriptor's directory. A descriptor may name a
    /// `preset` and override any of its keys.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(preset) = table.remove("preset") {
            let name = preset
                .as_str()
                .ok_or_else(|| Error::Config("preset must be a string".into()))?;
            let base = Self::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            let mut merged = toml::Table::try_from(&base)
                .map_err(|e| Error::Config(format!("preset {name}: {e}")))?;
            merged.extend(table);
            table = merged;
        }
        let mut desc: Self = table
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut desc.source, &mut desc.test_source].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(desc)
    }

    /// Loads (or synthesizes) the dataset this descriptor describes.
    pub fn load(&self) -> Result<Dataset> {
        if let Some(s) = &self.synthetic {
            return synthetic_dataset(&self.name, s);
        }
        let source = self
            .source
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset {} has no source", self.name)))?;
        load_dataset(source, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    pub template: Template,
    pub separator: String,
    pub fields: Vec<String>,
    pub k: usize,
    pub balanced: bool,
    /// True after [`build_unlabeled`].
    #[serde(default)]
    pub unlabeled: bool,
    pub train: Vec<TrainingExample>,
    pub dev: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<u64>,
    input: Input,
    label: RawLabel,
}

fn read_jsonl(path: &Path, desc: &DatasetDescriptor) -> Result<Vec<(u64, Input, usize)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let label = match rec.label {
            RawLabel::Index(i) if i < desc.verbalizers.len() => i,
            RawLabel::Index(i) => return Err(bad(format!("label {i} out of range"))),
            RawLabel::Name(s) => desc
                .verbalizers
                .iter()
                .position(|v| *v == s)
                .ok_or_else(|| bad(format!("unknown label {s:?}")))?,
        };
        for f in &desc.fields {
            match rec.input.get(f) {
                Some(v) if !v.trim().is_empty() => {}
                _ => return Err(bad(format!("missing or empty field {f:?}"))),
            }
        }
        out.push((rec.id.unwrap_or(n as u64), rec.input, label));
    }
    Ok(out)
}

/// Loads a JSONL source and samples class-balanced, pairwise disjoint
/// train/dev/test splits with the descriptor's seed.
pub fn load_dataset(path: &Path, desc: &DatasetDescriptor) -> Result<Dataset> {
    let c = desc.verbalizers.len();
    if c == 0 {
        return Err(Error::Config("descriptor has no verbalizers".into()));
    }
    let template = Template::new(desc.template.clone(), &desc.fields)?;
    let records = read_jsonl(path, desc)?;
    if records.is_empty() {
        return Err(Error::EmptySplit(format!("{} has no examples", path.display())));
    }
    let tests_separate = desc.test_source.is_some();
    let test_records = match &desc.test_source {
        Some(p) => read_jsonl(p, desc)?,
        None => Vec::new(),
    };

    let train_per_class = desc.train_size / c;
    let test_per_class = desc.test_size / c;
    if train_per_class * c != desc.train_size || test_per_class * c != desc.test_size {
        log::warn!(
            "{}: split sizes rounded down to a multiple of {c} classes",
            desc.name
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(desc.seed);
    let by_class = |recs: &[(u64, Input, usize)], exclude: &HashSet<Input>| {
        let mut seen: HashSet<&Input> = HashSet::new();
        let mut groups: Vec<Vec<(u64, Input)>> = vec![Vec::new(); c];
        for (id, input, label) in recs {
            if exclude.contains(input) || !seen.insert(input) {
                continue;
            }
            groups[*label].push((*id, input.clone()));
        }
        groups
    };

    let mut groups = by_class(&records, &HashSet::new());
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for (label, g) in groups.iter_mut().enumerate() {
        g.shuffle(&mut rng);
        let need = train_per_class + desc.dev_per_class + if tests_separate { 0 } else { test_per_class };
        if g.len() < need {
            return Err(Error::Config(format!(
                "class {label} ({}) has {} distinct examples, balanced splits need {need}",
                desc.verbalizers[label],
                g.len()
            )));
        }
        let mut it = g.drain(..);
        dev.extend(it.by_ref().take(desc.dev_per_class).map(|(i, x)| (i, x, label)));
        train.extend(it.by_ref().take(train_per_class).map(|(i, x)| (i, x, label)));
        if !tests_separate {
            test.extend(it.take(test_per_class).map(|(i, x)| (i, x, label)));
        }
    }
    if tests_separate {
        let used: HashSet<Input> = train.iter().chain(&dev).map(|(_, x, _)| x.clone()).collect();
        let mut tgroups = by_class(&test_records, &used);
        for (label, g) in tgroups.iter_mut().enumerate() {
            g.shuffle(&mut rng);
            if g.len() < test_per_class {
                return Err(Error::Config(format!(
                    "test source class {label} has {} examples, need {test_per_class}",
                    g.len()
                )));
            }
            test.extend(g.drain(..test_per_class).map(|(i, x)| (i, x, label)));
        }
    }

    let finish = |mut v: Vec<(u64, Input, usize)>| -> Vec<TrainingExample> {
        v.sort_by_key(|(i, _, _)| *i);
        v.into_iter()
            .enumerate()
            .map(|(id, (_, input, label))| TrainingExample {
                id,
                input,
                label,
                gold: Some(true),
                origin: None,
            })
            .collect()
    };
    let ds = Dataset {
        name: desc.name.clone(),
        classes: desc.verbalizers.clone(),
        template,
        separator: desc.separator.clone(),
        fields: desc.fields.clone(),
        k: desc.k,
        balanced: desc.balanced,
        unlabeled: false,
        train: finish(train),
        dev: finish(dev),
        test: finish(test),
    };
    ds.validate()?;
    Ok(ds)
}

/// Generates a seeded toy corpus of random word sequences. The template is
/// `Input: {text}\nLabel: {label}`; verbalizers are `negative`/`positive` for
/// two classes and `c0..` otherwise.
pub fn synthetic_dataset(name: &str, spec: &SyntheticCorpus) -> Result<Dataset> {
    let c = spec.classes;
    if c == 0 || !spec.n_train.is_multiple_of(c) {
        return Err(Error::Config(format!(
            "synthetic n_train {} must be a positive multiple of {c} classes",
            spec.n_train
        )));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words || spec.vocab == 0 {
        return Err(Error::Config("synthetic word-length range invalid".into()));
    }
    let classes: Vec<String> = if c == 2 {
        vec!["negative".into(), "positive".into()]
    } else {
        (0..c).map(|i| format!("c{i}")).collect()
    };
    let fields = vec!["text".to_string()];
    let template = Template::new("Input: {text}\nLabel: {label}", &fields)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut serial = 0usize;
    let mut make = |n_per_class: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n_per_class * c);
        for i in 0..n_per_class * c {
            let len = rng.random_range(spec.min_words..=spec.max_words);
            // A serial first token keeps every input distinct across splits.
            let mut words = vec![format!("s{serial}")];
            serial += 1;
            words.extend((1..len).map(|_| format!("w{}", rng.random_range(0..spec.vocab))));
            let mut input = Input::new();
            input.insert("text".into(), words.join(" "));
            out.push(TrainingExample {
                id: i,
                input,
                label: i % c,
                gold: Some(true),
                origin: None,
            });
        }
        out
    };
    let train = make(spec.n_train / c, &mut rng);
    let dev = make(spec.dev_per_class, &mut rng);
    let test = make(spec.test_per_class, &mut rng);
    let ds = Dataset {
        name: name.to_string(),
        classes,
        template,
        separator: default_separator(),
        fields,
        k: 4.min(spec.n_train),
        balanced: false,
        unlabeled: false,
        train,
        dev,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Pairs every training input with every class. Ids are `orig * C + class`;
/// `gold` marks the copy whose label equals the original.
pub fn build_unlabeled(dataset: &Dataset) -> Result<Dataset> {
    let c = dataset.num_classes();
    let mut train = Vec::with_capacity(dataset.train.len() * c);
    for ex in &dataset.train {
        if ex.gold != Some(true) {
            return Err(Error::Unsupported(format!(
                "example {} has no gold label to expand from",
                ex.id
            )));
        }
        for label in 0..c {
            train.push(TrainingExample {
                id: ex.id * c + label,
                input: ex.input.clone(),
                label,
                gold: Some(label == ex.label),
                origin: Some(ex.id),
            });
        }
    }
    Ok(Dataset {
        train,
        unlabeled: true,
        ..dataset.clone()
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[TrainingExample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn example(&self, split: Split, id: ExampleId) -> Result<&TrainingExample> {
        self.split(split)
            .get(id)
            .filter(|e| e.id == id)
            .ok_or(Error::UnknownExample {
                id,
                split: split.to_string(),
            })
    }

    /// Checks the structural invariants: dense ids, labels in range,
    /// non-empty inputs, balanced dev/test, and disjoint splits.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let xs = self.split(split);
            if xs.is_empty() {
                return Err(Error::EmptySplit(format!("{} {split}", self.name)));
            }
            for (i, ex) in xs.iter().enumerate() {
                if ex.id != i {
                    return Err(Error::Config(format!("{split} ids must be dense, found {} at {i}", ex.id)));
                }
                if ex.label >= c {
                    return Err(Error::Config(format!("{split} example {i} label out of range")));
                }
                if ex.input.is_empty() || ex.input.values().all(|v| v.trim().is_empty()) {
                    return Err(Error::Config(format!("{split} example {i} has empty input")));
                }
            }
        }
        for split in [Split::Dev, Split::Test] {
            let counts = class_counts(self.split(split), c);
            if counts.iter().any(|&n| n != counts[0]) {
                return Err(Error::Config(format!("{split} split is not class-balanced: {counts:?}")));
            }
        }
        let mut owner: BTreeMap<&Input, Split> = BTreeMap::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for ex in self.split(split) {
                if let Some(prev) = owner.insert(&ex.input, split) {
                    if prev != split {
                        return Err(Error::Config(format!(
                            "{split} example {} also appears in {prev}",
                            ex.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every verbalizer (as it continues a stub) must be a single token
    /// under the backend's tokenizer.
    pub fn validate_verbalizers(&self, backend: &dyn Backend) -> Result<()> {
        for cand in self.label_candidates() {
            let tokens = backend.count_tokens(&cand)?;
            if tokens != 1 {
                return Err(Error::Verbalizer {
                    verbalizer: cand,
                    tokens,
                });
            }
        }
        Ok(())
    }

    pub fn label_candidates(&self) -> Vec<String> {
        let (_, ws) = self.template.render_stub(&self.content_free_input("x"));
        self.classes.iter().map(|v| format!("{ws}{v}")).collect()
    }

    /// Input with every field set to `text`, for content-free probes.
    pub fn content_free_input(&self, text: &str) -> Input {
        self.fields
            .iter()
            .map(|f| (f.clone(), text.to_string()))
            .collect()
    }

    pub fn query_ref(&self, split: Split, ex: &TrainingExample) -> QueryRef {
        QueryRef {
            dataset: self.name.clone(),
            split,
            id: ex.id,
            label: ex.label,
        }
    }

    /// Renders the train examples `context` (in order) followed by the
    /// query stub for `input`.
    pub fn render(
        &self,
        context: &[ExampleId],
        input: &Input,
        query: Option<QueryRef>,
    ) -> Result<RenderedPrompt> {
        let mut text = String::new();
        for &id in context {
            let ex = self.example(Split::Train, id)?;
            text.push_str(&self.template.render_example(&ex.input, &self.classes[ex.label]));
            text.push_str(&self.separator);
        }
        let (stub, ws) = self.template.render_stub(input);
        text.push_str(&stub);
        Ok(RenderedPrompt {
            text,
            label_candidates: self.classes.iter().map(|v| format!("{ws}{v}")).collect(),
            context: context.to_vec(),
            query,
        })
    }

    /// Renders `context` against an example of this dataset's `split`.
    pub fn render_query(
        &self,
        context: &[ExampleId],
        split: Split,
        ex: &TrainingExample,
    ) -> Result<RenderedPrompt> {
        self.render(context, &ex.input, Some(self.query_ref(split, ex)))
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.label).collect()
    }
}

pub(crate) fn class_counts(xs: &[TrainingExample], c: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    for ex in xs {
        counts[ex.label] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SyntheticBackend, SyntheticOracleSpec};
    use std::io::Write;

    fn toy_descriptor() -> DatasetDescriptor {
        let mut d = DatasetDescriptor::preset("sst2").unwrap();
        d.train_size = 2;
        d.test_size = 2;
        d.dev_per_class = 1;
        d.seed = 7;
        d
    }

    fn write_toy(dir: &Path, n: usize) -> PathBuf {
        let p = dir.join("toy.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        for i in 0..n {
            writeln!(
                f,
                r#"{{"id": {i}, "input": {{"sentence": "sentence number {i}"}}, "label": {}}}"#,
                i % 2
            )
            .unwrap();
        }
        p
    }

    #[test]
    fn sst2_preset() {
        let d = DatasetDescriptor::preset("SST-2").unwrap();
        assert_eq!(d.verbalizers, ["negative", "positive"]);
        assert_eq!(d.k, 4);
        assert!(!d.balanced);
        assert_eq!(d.dev_per_class, 50);
        assert_eq!((d.train_size, d.test_size), (1000, 1000));
    }

    #[test]
    fn toy_file_gives_balanced_deterministic_splits() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_toy(dir.path(), 6);
        let desc = toy_descriptor();
        let a = load_dataset(&p, &desc).unwrap();
        assert_eq!(a.dev.len(), 2);
        assert_eq!(class_counts(&a.dev, 2), [1, 1]);
        assert_eq!(class_counts(&a.train, 2), [1, 1]);
        assert_eq!(class_counts(&a.test, 2), [1, 1]);
        let b = load_dataset(&p, &desc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_file_is_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_toy(dir.path(), 0);
        let err = load_dataset(&p, &toy_descriptor()).unwrap_err();
        assert!(err.to_string().contains("empty split"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(
            &p,
            "{\"input\": {\"sentence\": \"ok\"}, \"label\": 0}\n{\"input\": 3}\n",
        )
        .unwrap();
        match load_dataset(&p, &toy_descriptor()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_per_class_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_toy(dir.path(), 4);
        assert!(matches!(load_dataset(&p, &toy_descriptor()), Err(Error::Config(_))));
    }

    #[test]
    fn unlabeled_expansion_sizes() {
        let ds = synthetic_dataset("s", &SyntheticCorpus::new(1000, 2, 1)).unwrap();
        let un = build_unlabeled(&ds).unwrap();
        assert_eq!(un.train.len(), 2000);
        assert_eq!(un.train.iter().filter(|e| e.gold == Some(true)).count(), 1000);

        let ds4 = synthetic_dataset("s4", &SyntheticCorpus::new(1000, 4, 1)).unwrap();
        let un4 = build_unlabeled(&ds4).unwrap();
        assert_eq!(un4.train.len(), 4000);
        assert_eq!(un4.train.iter().filter(|e| e.gold == Some(true)).count(), 1000);
        assert_eq!(un4.dev, ds4.dev);

        let mut one = synthetic_dataset("s3", &SyntheticCorpus::new(3, 3, 1)).unwrap();
        one.train.truncate(1);
        let un = build_unlabeled(&one).unwrap();
        assert_eq!(un.train.len(), 3);
        assert_eq!(un.train.iter().filter(|e| e.gold == Some(true)).count(), 1);
        assert!(un.train.iter().all(|e| e.input_group() == 0));
    }

    #[test]
    fn render_zero_shot_is_stub_alone() {
        let ds = synthetic_dataset("s", &SyntheticCorpus::new(4, 2, 1)).unwrap();
        let r = ds.render(&[], &ds.test[0].input, None).unwrap();
        assert_eq!(r.text, format!("Input: {}\nLabel:", ds.test[0].input["text"]));
        assert_eq!(r.label_candidates, [" negative", " positive"]);
    }

    #[test]
    fn render_one_shot_sst2_layout() {
        let desc = DatasetDescriptor::preset("sst2").unwrap();
        let t = Template::new(desc.template, &desc.fields).unwrap();
        let mut x = Input::new();
        x.insert("sentence".into(), "contains no wit , only labored gags".into());
        assert_eq!(
            t.render_example(&x, "negative"),
            "Review: contains no wit , only labored gags\nSentiment: negative"
        );
        let mut ds = synthetic_dataset("s", &SyntheticCorpus::new(4, 2, 1)).unwrap();
        ds.template = t;
        ds.fields = vec!["sentence".into()];
        for ex in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            let v = ex.input.remove("text").unwrap();
            ex.input.insert("sentence".into(), v);
        }
        let r = ds.render(&[1], &ds.test[0].input, None).unwrap();
        let want = format!(
            "Review: {}\nSentiment: positive\n\nReview: {}\nSentiment:",
            ds.train[1].input["sentence"], ds.test[0].input["sentence"]
        );
        assert_eq!(r.text, want);
        let again = ds.render(&[1], &ds.test[0].input, None).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn render_unknown_id_errors() {
        let ds = synthetic_dataset("s", &SyntheticCorpus::new(4, 2, 1)).unwrap();
        assert!(matches!(
            ds.render(&[9], &ds.test[0].input, None),
            Err(Error::UnknownExample { id: 9, .. })
        ));
    }

    #[test]
    fn verbalizers_single_token_under_synthetic_tokenizer() {
        let ds = synthetic_dataset("s", &SyntheticCorpus::new(4, 2, 1)).unwrap();
        let backend = SyntheticBackend::new(SyntheticOracleSpec::constant(4, 4, 0.0));
        ds.validate_verbalizers(&backend).unwrap();
        let mut bad = ds.clone();
        bad.classes[1] = "very positive".into();
        assert!(matches!(
            bad.validate_verbalizers(&backend),
            Err(Error::Verbalizer { tokens: 2, .. })
        ));
    }

    #[test]
    fn descriptor_file_with_preset_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.toml");
        fs::write(&p, "preset = \"agnews\"\nsource = \"ag.jsonl\"\ntrain_size = 40\n").unwrap();
        let d = DatasetDescriptor::from_file(&p).unwrap();
        assert_eq!(d.verbalizers.len(), 4);
        assert!(d.balanced);
        assert_eq!(d.train_size, 40);
        assert_eq!(d.source.unwrap(), dir.path().join("ag.jsonl"));
    }

    proptest::proptest! {
        #[test]
        fn rendering_distinguishes_orders(a in 0usize..8, b in 0usize..8) {
            proptest::prop_assume!(a != b);
            let ds = synthetic_dataset("s", &SyntheticCorpus::new(8, 2, 3)).unwrap();
            let x = &ds.test[0].input;
            let ab = ds.render(&[a, b], x, None).unwrap();
            let ba = ds.render(&[b, a], x, None).unwrap();
            proptest::prop_assert_ne!(ab.text, ba.text);
        }
    }
}

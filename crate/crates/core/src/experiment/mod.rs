//! Experiment configuration, the run matrix and its artifacts.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/runs/<config hash>/
//!     config.json  records.jsonl
//!     tables/        one text and one CSV table per task
//!     predictions/   <category>/<method>/<task>.jsonl
//!     payloads/      <category>/<variant>/<task>/{train,test}.jsonl
//!     checkpoints/   <category>/<method>[-<task>].json
//!     annotations/   store.jsonl
//! ```

pub mod annotation;
pub mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::collab::{
    predict_alone, run_collaboration, train_alone, write_payload_cache, BackendId, CollabContext,
    CollabDirection, CollabOutcome, CopyAssistCrs, CrsSystem, GoldEchoCrs, Participant, Split,
    TrainableCrs, VariantName,
};
use crate::corpus::{
    generate_synthetic_corpus, load_uneed_format, CategoryCorpus, Role, SyntheticSpec,
};
use crate::crs::{CrsSettings, TrainingSchedule, UnifiedCrs};
use crate::error::{Error, Result};
use crate::eval::{evaluate, AggregationMode, MetricReport, Prediction};
use crate::llm::{
    build_instruction_sample, CopyAssistLlm, ExternalConfig, ExternalLlm, InstructionSample,
    LLMBackend, NoisyOracleLlm, OracleLlm, TemplateSet, TinyLlm, TinyLlmConfig,
};
use crate::tasks::{build_instances, InstanceKey, TaskInstance, TaskKind};
use crate::util::{derive_seed, sha256_hex};

pub use tables::{emit_tables, human_table, Table, TableRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic(SyntheticSpec),
    /// A directory in the line-delimited dialogue/catalog layout.
    Path {
        path: PathBuf,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SyntheticSpec::default())
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<CategoryCorpus>> {
        match self {
            CorpusSource::Synthetic(spec) => generate_synthetic_corpus(spec),
            CorpusSource::Path { path } => {
                Ok(load_uneed_format(path)?.categories.into_values().collect())
            }
        }
    }
}

/// How one role of the variant grid is realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Tiny trainable model. For a CRS `seed` overrides the CRS settings
    /// seed; for an LLM it seeds the decoder.
    Tiny {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        epochs: Option<usize>,
    },
    /// Answers with the gold output of every instance it knows.
    #[serde(alias = "gold-echo")]
    Oracle,
    /// LLM oracle that is right with probability `p`.
    Noisy { p: f64, seed: u64 },
    /// Emits whatever the assisting system said.
    CopyAssist,
    /// Remote chat-completions LLM; the key is read from the environment.
    External(ExternalConfig),
}

impl BackendSpec {
    fn supports(&self, id: BackendId) -> bool {
        match self {
            BackendSpec::Noisy { .. } | BackendSpec::External(_) => id.is_llm(),
            _ => true,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            BackendSpec::Tiny { .. } => "tiny",
            BackendSpec::Oracle => "oracle",
            BackendSpec::Noisy { .. } => "noisy",
            BackendSpec::CopyAssist => "copy-assist",
            BackendSpec::External(_) => "external",
        }
    }
}

fn all_variants() -> Vec<VariantName> {
    VariantName::ALL.to_vec()
}

fn all_tasks() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}

fn default_candidate_seed() -> u64 {
    7
}

fn default_language() -> String {
    "en".into()
}

fn default_workers() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default)]
    pub backends: BTreeMap<BackendId, BackendSpec>,
    #[serde(default = "all_variants")]
    pub variants: Vec<VariantName>,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<TaskKind>,
    /// Category ids to run; empty means all.
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub schedule: TrainingSchedule,
    #[serde(default)]
    pub crs: CrsSettings,
    #[serde(default = "default_candidate_seed")]
    pub candidate_seed: u64,
    #[serde(default)]
    pub aggregation: AggregationMode,
    /// Feed gold instead of assister predictions (diagnostics only).
    #[serde(default)]
    pub gold_assist: bool,
    #[serde(default = "default_language")]
    pub language: String,
    /// Worker threads for matrix cells.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c = Self::parse_toml(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Parse without [`validate`](Self::validate), for callers that fill in
    /// fields afterwards.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every variant's backends resolve and suit their role.
    pub fn validate(&self) -> Result<()> {
        for v in &self.variants {
            for id in [v.assister(), v.assisted()] {
                if !self.backends.contains_key(&id) {
                    return Err(Error::Config(format!(
                        "variant {v} needs backend {id}, which is not bound"
                    )));
                }
            }
        }
        for (id, spec) in &self.backends {
            if !spec.supports(*id) {
                return Err(Error::Config(format!("{} cannot play {id}", spec.label())));
            }
            if let BackendSpec::Noisy { p, .. } = spec {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "noisy accuracy {p} is not a probability"
                    )));
                }
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks selected".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        TemplateSet::builtin(&self.language)?;
        Ok(())
    }

    /// Digest of everything that influences results. Output location and
    /// worker count are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("workers");
        }
        sha256_hex(
            serde_json::to_string(&v)
                .expect("value serializes")
                .as_bytes(),
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.hash())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payloads: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Result of one matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// A backend id for baselines, the variant name otherwise.
    pub method: String,
    pub direction: CollabDirection,
    pub task: TaskKind,
    pub category: String,
    pub report: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub deterministic: bool,
    #[serde(default)]
    pub assist_failures: usize,
    #[serde(default)]
    pub artifacts: Artifacts,
}

impl RunRecord {
    pub fn variant(&self) -> Option<VariantName> {
        self.method.parse().ok()
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    read_jsonl(path)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                file: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub key: InstanceKey,
    pub input: String,
    pub prediction: Prediction,
    /// Generation only: the dialogue so far and the reference response.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<(Role, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Instances of one category, split and grouped.
#[derive(Debug, Clone)]
pub struct CategoryData {
    pub corpus: CategoryCorpus,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl CategoryData {
    pub fn new(corpus: CategoryCorpus, candidate_seed: u64) -> Result<Self> {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for kind in TaskKind::ALL {
            train.extend(build_instances(
                &corpus.split.train,
                &corpus.catalog,
                kind,
                candidate_seed,
            )?);
            test.extend(build_instances(
                &corpus.split.test,
                &corpus.catalog,
                kind,
                candidate_seed,
            )?);
        }
        Ok(CategoryData {
            corpus,
            train,
            test,
        })
    }

    pub fn id(&self) -> &str {
        &self.corpus.catalog.category.id
    }

    /// Instruction samples of both splits for one task.
    pub fn samples(
        &self,
        kind: TaskKind,
        templates: &TemplateSet,
    ) -> Result<Vec<InstructionSample>> {
        self.train
            .iter()
            .chain(&self.test)
            .filter(|i| i.kind() == kind)
            .map(|i| build_instruction_sample(i, &self.corpus.catalog.category, templates))
            .collect()
    }

    pub fn context<'a>(
        &'a self,
        kind: TaskKind,
        templates: &'a TemplateSet,
        gold_assist: bool,
    ) -> CollabContext<'a> {
        CollabContext {
            kind,
            category: &self.corpus.catalog.category,
            templates,
            train: &self.train,
            test: &self.test,
            gold_assist,
        }
    }
}

/// Builds fresh, untrained systems from their specs.
pub struct Factory<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a CategoryData,
    pub templates: &'a TemplateSet,
}

impl Factory<'_> {
    fn spec(&self, id: BackendId) -> Result<&BackendSpec> {
        self.config
            .backends
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no backend bound to {id}")))
    }

    pub fn crs(&self, id: BackendId) -> Result<Box<dyn CrsSystem>> {
        match self.spec(id)? {
            BackendSpec::Tiny { seed, epochs } => {
                let mut settings = self.config.crs;
                settings.seed = seed.unwrap_or_else(|| derive_seed(settings.seed, &[id.as_str()]));
                let mut schedule = self.config.schedule;
                if let Some(e) = epochs {
                    schedule.warmup_epochs = *e;
                    schedule.joint_epochs = *e;
                }
                let crs = UnifiedCrs::tiny([&self.data.corpus.catalog], settings);
                Ok(Box::new(TrainableCrs::new(id.as_str(), crs, schedule)))
            }
            BackendSpec::Oracle => {
                let all: Vec<TaskInstance> = self
                    .data
                    .train
                    .iter()
                    .chain(&self.data.test)
                    .cloned()
                    .collect();
                let ids = self
                    .data
                    .corpus
                    .catalog
                    .products()
                    .iter()
                    .map(|p| p.product_id.clone())
                    .collect();
                Ok(Box::new(GoldEchoCrs::new(&all, ids)?))
            }
            BackendSpec::CopyAssist => Ok(Box::new(CopyAssistCrs)),
            other => Err(Error::Config(format!("{} cannot play {id}", other.label()))),
        }
    }

    pub fn llm(&self, id: BackendId, kind: TaskKind) -> Result<Box<dyn LLMBackend>> {
        match self.spec(id)? {
            BackendSpec::Tiny { seed, epochs } => {
                let mut c = TinyLlmConfig::default();
                c.seed = seed.unwrap_or_else(|| derive_seed(c.seed, &[id.as_str()]));
                if let Some(e) = epochs {
                    c.epochs = *e;
                }
                Ok(Box::new(TinyLlm::new(c)))
            }
            BackendSpec::Oracle => Ok(Box::new(OracleLlm::new(
                &self.data.samples(kind, self.templates)?,
            ))),
            BackendSpec::Noisy { p, seed } => {
                let samples = self.data.samples(kind, self.templates)?;
                Ok(Box::new(NoisyOracleLlm::new(&samples, *p, *seed)?))
            }
            BackendSpec::CopyAssist => Ok(Box::new(CopyAssistLlm)),
            BackendSpec::External(c) => Ok(Box::new(ExternalLlm::new(c.clone())?)),
        }
    }

    pub fn participant(&self, id: BackendId, kind: TaskKind) -> Result<Participant> {
        if id.is_llm() {
            self.llm(id, kind).map(Participant::Llm)
        } else {
            self.crs(id).map(Participant::Crs)
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct CellOutput {
    outcome: CollabOutcome,
    checkpoint: Option<PathBuf>,
}

/// Everything needed to finish a cell into a record.
struct CellMeta<'a> {
    method: String,
    direction: CollabDirection,
    kind: TaskKind,
    deterministic: bool,
    started: u64,
    data: &'a CategoryData,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    hash: String,
    dir: PathBuf,
    templates: TemplateSet,
}

impl Runner<'_> {
    fn finish(&self, meta: CellMeta, result: Result<CellOutput>) -> RunRecord {
        let mut record = RunRecord {
            method: meta.method.clone(),
            direction: meta.direction,
            task: meta.kind,
            category: meta.data.id().to_string(),
            report: None,
            error: None,
            config_hash: self.hash.clone(),
            started_ms: meta.started,
            finished_ms: 0,
            deterministic: meta.deterministic,
            assist_failures: 0,
            artifacts: Artifacts::default(),
        };
        let stored = result.and_then(|cell| {
            record.artifacts.checkpoint = cell.checkpoint;
            record.assist_failures = cell.outcome.assist_failures;
            self.store(&meta, &cell.outcome, &mut record.artifacts)?;
            evaluate(
                meta.kind,
                meta.data.id(),
                &meta.data.test,
                &cell.outcome.predictions,
            )
        });
        match stored {
            Ok(report) => record.report = Some(report),
            Err(e) => {
                log::warn!("{} {} {}: {e}", record.category, record.method, record.task);
                record.error = Some(e.to_string());
            }
        }
        record.finished_ms = now_ms();
        record
    }

    fn store(
        &self,
        meta: &CellMeta,
        outcome: &CollabOutcome,
        artifacts: &mut Artifacts,
    ) -> Result<()> {
        let cat = meta.data.id();
        let mut dumps: Vec<PredictionDump> = Vec::new();
        for inst in meta.data.test.iter().filter(|i| i.kind() == meta.kind) {
            let key = inst.key();
            let Some(prediction) = outcome.predictions.get(&key) else {
                continue;
            };
            let generation = meta.kind == TaskKind::Generation;
            dumps.push(PredictionDump {
                input: outcome.inputs.get(&key).cloned().unwrap_or_default(),
                prediction: prediction.clone(),
                context: if generation {
                    inst.context
                        .iter()
                        .map(|t| (t.role(), t.utterance.text.clone()))
                        .collect()
                } else {
                    Vec::new()
                },
                reference: inst.gold_response().map(str::to_string),
                key,
            });
        }
        let path = self
            .dir
            .join("predictions")
            .join(cat)
            .join(&meta.method)
            .join(format!("{}.jsonl", meta.kind));
        write_jsonl(&path, &dumps)?;
        artifacts.predictions = Some(path);
        if !outcome.payloads.is_empty() {
            for split in [Split::Train, Split::Test] {
                let records: Vec<_> = outcome
                    .payloads
                    .iter()
                    .filter(|r| r.split == split)
                    .cloned()
                    .collect();
                let name = if split == Split::Train {
                    "train.jsonl"
                } else {
                    "test.jsonl"
                };
                let path = self
                    .dir
                    .join("payloads")
                    .join(cat)
                    .join(&meta.method)
                    .join(meta.kind.as_str())
                    .join(name);
                write_payload_cache(&path, &records)?;
                artifacts.payloads.push(path);
            }
        }
        Ok(())
    }

    fn save_crs(&self, p: &Participant, category: &str, name: &str) -> Option<PathBuf> {
        let Participant::Crs(crs) = p else {
            return None;
        };
        let path = self
            .dir
            .join("checkpoints")
            .join(category)
            .join(format!("{name}.json"));
        match crs.save(&path) {
            Ok(()) => Some(path),
            Err(Error::Unsupported(_)) => None,
            Err(e) => {
                log::warn!("could not save {name}: {e}");
                None
            }
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn category(&self, data: &CategoryData) -> Result<Vec<RunRecord>> {
        let config = self.config;
        let factory = Factory {
            config,
            data,
            templates: &self.templates,
        };
        let cat = data.id().to_string();
        let mut records = Vec::new();
        let ids: BTreeSet<BackendId> = config.backends.keys().copied().collect();

        // Baselines. A CRS is trained once on every task and evaluated per
        // task; an LLM is fine-tuned per task. Both are kept as assisters.
        let mut crs_assisters: HashMap<BackendId, std::result::Result<Participant, String>> =
            HashMap::new();
        for &id in ids.iter().filter(|i| !i.is_llm()) {
            let started = now_ms();
            let t0 = Instant::now();
            let trained = factory.participant(id, config.tasks[0]).and_then(|mut p| {
                train_alone(
                    &data.context(config.tasks[0], &self.templates, false),
                    &mut p,
                )?;
                Ok(p)
            });
            log::info!("{cat}: trained {id} in {:.1?}", t0.elapsed());
            let checkpoint = trained
                .as_ref()
                .ok()
                .and_then(|p| self.save_crs(p, &cat, id.as_str()));
            for &kind in &config.tasks {
                let meta = CellMeta {
                    method: id.to_string(),
                    direction: CollabDirection::None,
                    kind,
                    deterministic: trained
                        .as_ref()
                        .map(Participant::deterministic)
                        .unwrap_or(true),
                    started,
                    data,
                };
                let result = match &trained {
                    Ok(p) => predict_alone(&data.context(kind, &self.templates, false), p).map(
                        |outcome| CellOutput {
                            outcome,
                            checkpoint: checkpoint.clone(),
                        },
                    ),
                    Err(e) => Err(Error::Precondition(format!("training failed: {e}"))),
                };
                records.push(self.finish(meta, result));
            }
            crs_assisters.insert(id, trained.map_err(|e| e.to_string()));
        }

        let pool = self.pool()?;
        let llm_cells: Vec<(BackendId, TaskKind)> = ids
            .iter()
            .filter(|i| i.is_llm())
            .flat_map(|&id| config.tasks.iter().map(move |&k| (id, k)))
            .collect();
        let llm_results: Vec<(
            BackendId,
            TaskKind,
            RunRecord,
            std::result::Result<Participant, String>,
        )> = pool.install(|| {
            use rayon::prelude::*;
            llm_cells
                .par_iter()
                .map(|&(id, kind)| {
                    let started = now_ms();
                    let ctx = data.context(kind, &self.templates, false);
                    let trained = factory.participant(id, kind).and_then(|mut p| {
                        train_alone(&ctx, &mut p)?;
                        Ok(p)
                    });
                    let meta = CellMeta {
                        method: id.to_string(),
                        direction: CollabDirection::None,
                        kind,
                        deterministic: trained
                            .as_ref()
                            .map(Participant::deterministic)
                            .unwrap_or(true),
                        started,
                        data,
                    };
                    let result = match &trained {
                        Ok(p) => predict_alone(&ctx, p).map(|outcome| CellOutput {
                            outcome,
                            checkpoint: None,
                        }),
                        Err(e) => Err(Error::Precondition(format!("fine-tuning failed: {e}"))),
                    };
                    let record = self.finish(meta, result);
                    (id, kind, record, trained.map_err(|e| e.to_string()))
                })
                .collect()
        });
        let mut llm_assisters: HashMap<
            (BackendId, TaskKind),
            std::result::Result<Participant, String>,
        > = HashMap::new();
        for (id, kind, record, trained) in llm_results {
            records.push(record);
            llm_assisters.insert((id, kind), trained);
        }

        // Variants: a fresh assisted system per cell, trained on assisted
        // inputs.
        let cells: Vec<(VariantName, TaskKind)> = config
            .variants
            .iter()
            .flat_map(|&v| config.tasks.iter().map(move |&k| (v, k)))
            .collect();
        let variant_records: Vec<RunRecord> = pool.install(|| {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|&(variant, kind)| {
                    let started = now_ms();
                    let ctx = data.context(kind, &self.templates, config.gold_assist);
                    let assister = if variant.assister().is_llm() {
                        llm_assisters.get(&(variant.assister(), kind))
                    } else {
                        crs_assisters.get(&variant.assister())
                    };
                    let mut assisted = factory.participant(variant.assisted(), kind);
                    let deterministic = assisted
                        .as_ref()
                        .map(Participant::deterministic)
                        .unwrap_or(true)
                        && matches!(assister, Some(Ok(p)) if p.deterministic());
                    let result = match (assister, assisted.as_mut()) {
                        (Some(Ok(a)), Ok(b)) => {
                            run_collaboration(variant, &ctx, Some(a), Some(&mut *b)).map(
                                |outcome| {
                                    let name = format!("{variant}-{kind}");
                                    CellOutput {
                                        outcome,
                                        checkpoint: self.save_crs(b, &cat, &name),
                                    }
                                },
                            )
                        }
                        (Some(Err(e)), _) => {
                            Err(Error::Precondition(format!("assister unavailable: {e}")))
                        }
                        (None, _) => run_collaboration(variant, &ctx, None, assisted.as_mut().ok())
                            .map(|outcome| CellOutput {
                                outcome,
                                checkpoint: None,
                            }),
                        (_, Err(e)) => Err(Error::Config(e.to_string())),
                    };
                    let meta = CellMeta {
                        method: variant.to_string(),
                        direction: variant.direction(),
                        kind,
                        deterministic,
                        started,
                        data,
                    };
                    self.finish(meta, result)
                })
                .collect()
        });
        records.extend(variant_records);
        Ok(records)
    }
}

/// Run baselines for every bound backend, then every requested variant,
/// per task and category. Cell failures are recorded, not raised.
pub fn run_matrix(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let runner = Runner {
        config,
        hash: config.hash(),
        dir: config.run_dir(),
        templates: TemplateSet::builtin(&config.language)?,
    };
    std::fs::create_dir_all(&runner.dir).map_err(|e| Error::io(&runner.dir, e))?;
    let cfg_path = runner.dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(config)?)
        .map_err(|e| Error::io(&cfg_path, e))?;

    let mut corpora = config.corpus.load()?;
    if !config.categories.is_empty() {
        let known: BTreeSet<String> = corpora
            .iter()
            .map(|c| c.catalog.category.id.clone())
            .collect();
        for c in &config.categories {
            if !known.contains(c) {
                return Err(Error::Config(format!("unknown category {c:?}")));
            }
        }
        corpora.retain(|c| config.categories.contains(&c.catalog.category.id));
    }
    let mut records = Vec::new();
    for corpus in corpora {
        let data = CategoryData::new(corpus, config.candidate_seed)?;
        log::info!(
            "category {}: {} train / {} test instances",
            data.id(),
            data.train.len(),
            data.test.len()
        );
        records.extend(runner.category(&data)?);
    }
    write_records(&runner.dir.join("records.jsonl"), &records)?;
    let tables = emit_tables(&records, config.aggregation);
    tables::write_tables(&runner.dir.join("tables"), &tables)?;
    Ok(records)
}

//! Command-line front end: data generation, training, the run matrix,
//! reporting and the annotation service.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crsllm::collab::{predict_alone, train_alone, BackendId, Participant};
use crsllm::corpus::{write_uneed_format, CategoryCorpus};
use crsllm::eval::{evaluate, AggregationMode, AnnotationRecord};
use crsllm::experiment::annotation::{
    load_response_pool, serve, AnnotationService, DEFAULT_SAMPLE_SIZE,
};
use crsllm::experiment::tables::write_tables;
use crsllm::experiment::{
    emit_tables, human_table, read_records, run_matrix, BackendSpec, CategoryData, CorpusSource,
    ExperimentConfig, Factory,
};
use crsllm::llm::{build_instruction_sample, write_instruction_file, TemplateSet};
use crsllm::TaskKind;

#[derive(Parser)]
#[command(
    name = "crsllm",
    version,
    about = "CRS and LLM collaboration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Read the corpus from this directory instead of generating it.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed of the synthetic corpus.
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    candidate_seed: Option<u64>,
    /// Restrict to these category ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Instruction language (en or zh).
    #[arg(long)]
    language: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse_toml(&text)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.corpus {
            c.corpus = CorpusSource::Path { path: p.clone() };
        }
        if let (Some(seed), CorpusSource::Synthetic(spec)) = (self.corpus_seed, &mut c.corpus) {
            spec.seed = seed;
        }
        if let Some(s) = self.candidate_seed {
            c.candidate_seed = s;
        }
        if !self.categories.is_empty() {
            c.categories = self.categories.clone();
        }
        if let Some(l) = &self.language {
            c.language = l.clone();
        }
        if let Some(o) = &self.output_dir {
            c.output_dir = o.clone();
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the line-delimited layout.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dialogues: Option<usize>,
        #[arg(long)]
        products: Option<usize>,
        #[arg(long)]
        attributes: Option<usize>,
    },
    /// Write instruction samples as instruction/input/output records.
    BuildInstructions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Tasks to include (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        /// train, test or all.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train one CRS on every task and report test metrics.
    TrainCrs {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "BCRS")]
        backend: BackendId,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        joint_epochs: Option<usize>,
    },
    /// Fine-tune one LLM backend on a task and report test metrics.
    FinetuneLlm {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "CLLM")]
        backend: BackendId,
        #[arg(long)]
        task: TaskKind,
    },
    /// Run baselines and collaboration variants, then write tables.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Feed gold instead of assister predictions.
        #[arg(long)]
        gold_assist: bool,
    },
    /// Rebuild tables from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        aggregation: Option<AggregationMode>,
    },
    /// Serve the blinded human-evaluation endpoints for a run.
    ServeAnnotation {
        #[arg(long)]
        run_dir: PathBuf,
        /// Annotator ids (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        annotators: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
        sample_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        category: Option<String>,
    },
}

fn tiny() -> BackendSpec {
    BackendSpec::Tiny {
        seed: None,
        epochs: None,
    }
}

fn corpora(config: &ExperimentConfig) -> Result<Vec<CategoryCorpus>> {
    let mut all = config.corpus.load()?;
    if !config.categories.is_empty() {
        all.retain(|c| config.categories.contains(&c.catalog.category.id));
        if all.is_empty() {
            bail!("none of the categories {:?} exist", config.categories);
        }
    }
    Ok(all)
}

fn print_metrics(
    label: &str,
    kind: TaskKind,
    data: &CategoryData,
    p: &Participant,
    templates: &TemplateSet,
) -> Result<()> {
    let out = predict_alone(&data.context(kind, templates, false), p)?;
    let report = evaluate(kind, data.id(), &data.test, &out.predictions)?;
    let values: Vec<String> = report
        .values
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    println!(
        "{label} {} {kind}: {} (n={})",
        data.id(),
        values.join(" "),
        report.support
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            common,
            out,
            dialogues,
            products,
            attributes,
        } => {
            let mut config = common.config()?;
            let CorpusSource::Synthetic(spec) = &mut config.corpus else {
                bail!("gen-data needs a synthetic corpus source");
            };
            if let Some(n) = dialogues {
                spec.dialogues = n;
            }
            if let Some(n) = products {
                spec.products = n;
            }
            if let Some(n) = attributes {
                spec.attributes = n;
            }
            let all = corpora(&config)?;
            let written = write_uneed_format(&out, &all)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::BuildInstructions {
            common,
            out,
            tasks,
            split,
        } => {
            let config = common.config()?;
            let templates = TemplateSet::builtin(&config.language)?;
            let tasks = if tasks.is_empty() {
                TaskKind::ALL.to_vec()
            } else {
                tasks
            };
            let mut samples = Vec::new();
            for corpus in corpora(&config)? {
                let data = CategoryData::new(corpus, config.candidate_seed)?;
                let instances: Vec<_> = match split.as_str() {
                    "train" => data.train.iter().collect(),
                    "test" => data.test.iter().collect(),
                    "all" => data.train.iter().chain(&data.test).collect(),
                    other => bail!("unknown split {other:?}"),
                };
                for inst in instances.into_iter().filter(|i| tasks.contains(&i.kind())) {
                    samples.push(build_instruction_sample(
                        inst,
                        &data.corpus.catalog.category,
                        &templates,
                    )?);
                }
            }
            write_instruction_file(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::TrainCrs {
            common,
            backend,
            warmup_epochs,
            joint_epochs,
        } => {
            if backend.is_llm() {
                bail!("{backend} is not a CRS");
            }
            let mut config = common.config()?;
            if let Some(e) = warmup_epochs {
                config.schedule.warmup_epochs = e;
            }
            if let Some(e) = joint_epochs {
                config.schedule.joint_epochs = e;
            }
            config.backends.entry(backend).or_insert_with(tiny);
            let templates = TemplateSet::builtin(&config.language)?;
            for corpus in corpora(&config)? {
                let data = CategoryData::new(corpus, config.candidate_seed)?;
                let factory = Factory {
                    config: &config,
                    data: &data,
                    templates: &templates,
                };
                let mut p = factory.participant(backend, TaskKind::Understanding)?;
                train_alone(
                    &data.context(TaskKind::Understanding, &templates, false),
                    &mut p,
                )?;
                let dir = config.output_dir.join("checkpoints").join(data.id());
                std::fs::create_dir_all(&dir)?;
                if let Participant::Crs(crs) = &p {
                    let ckpt = dir.join(format!("{backend}.json"));
                    match crs.save(&ckpt) {
                        Ok(()) => println!("checkpoint {}", ckpt.display()),
                        Err(e) => log::warn!("no checkpoint: {e}"),
                    }
                    if let Some(report) = crs.training_report() {
                        let curves = dir.join(format!("{backend}.curves.jsonl"));
                        report.write_curves(&curves)?;
                        println!("loss curves {}", curves.display());
                    }
                }
                for kind in TaskKind::ALL {
                    print_metrics(backend.as_str(), kind, &data, &p, &templates)?;
                }
            }
        }
        Command::FinetuneLlm {
            common,
            backend,
            task,
        } => {
            if !backend.is_llm() {
                bail!("{backend} is not an LLM");
            }
            let mut config = common.config()?;
            config.backends.entry(backend).or_insert_with(tiny);
            let templates = TemplateSet::builtin(&config.language)?;
            for corpus in corpora(&config)? {
                let data = CategoryData::new(corpus, config.candidate_seed)?;
                let factory = Factory {
                    config: &config,
                    data: &data,
                    templates: &templates,
                };
                let mut p = factory.participant(backend, task)?;
                train_alone(&data.context(task, &templates, false), &mut p)?;
                print_metrics(backend.as_str(), task, &data, &p, &templates)?;
            }
        }
        Command::Run {
            common,
            workers,
            gold_assist,
        } => {
            let mut config = common.config()?;
            if let Some(w) = workers {
                config.workers = w;
            }
            config.gold_assist |= gold_assist;
            if config.backends.is_empty() {
                log::info!("no backends configured; using the tiny backend for all four systems");
                config.backends = BackendId::ALL.iter().map(|&id| (id, tiny())).collect();
            }
            let records = run_matrix(&config)?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            for t in emit_tables(&records, config.aggregation) {
                println!("{}", t.to_text());
            }
            println!(
                "{} records ({} failed) in {}",
                records.len(),
                failed,
                config.run_dir().display()
            );
        }
        Command::Report {
            run_dir,
            aggregation,
        } => report(&run_dir, aggregation)?,
        Command::ServeAnnotation {
            run_dir,
            annotators,
            addr,
            sample_size,
            seed,
            category,
        } => {
            let pool = load_response_pool(&run_dir, category.as_deref())?;
            if pool.is_empty() {
                bail!("no generation predictions under {}", run_dir.display());
            }
            let store = run_dir.join("annotations").join("store.jsonl");
            let service =
                AnnotationService::new(pool, &annotators, sample_size, seed, Some(store))?;
            println!(
                "{} items over {} methods",
                service.len(),
                service.methods().len()
            );
            tokio::runtime::Runtime::new()?.block_on(serve(addr, service))?;
        }
    }
    Ok(())
}

fn report(run_dir: &Path, aggregation: Option<AggregationMode>) -> Result<()> {
    let records = read_records(&run_dir.join("records.jsonl"))?;
    let mode = match aggregation {
        Some(m) => m,
        None => {
            let cfg = std::fs::read(run_dir.join("config.json")).ok();
            cfg.and_then(|b| serde_json::from_slice::<ExperimentConfig>(&b).ok())
                .map(|c| c.aggregation)
                .unwrap_or_default()
        }
    };
    let mut tables = emit_tables(&records, mode);
    let store = run_dir.join("annotations").join("store.jsonl");
    if store.exists() {
        let text = std::fs::read_to_string(&store)?;
        let human: Vec<AnnotationRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if !human.is_empty() {
            tables.push(human_table(&human));
        }
    }
    for t in &tables {
        println!("{}", t.to_text());
    }
    let failures: HashMap<&str, usize> =
        records
            .iter()
            .filter(|r| r.error.is_some())
            .fold(HashMap::new(), |mut m, r| {
                *m.entry(r.method.as_str()).or_default() += 1;
                m
            });
    for (method, n) in failures {
        println!("{method}: {n} failed cell(s)");
    }
    write_tables(&run_dir.join("tables"), &tables)?;
    Ok(())
}

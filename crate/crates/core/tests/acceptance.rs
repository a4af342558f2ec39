//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS or FAIL line; exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crsllm::collab::{
    augment_instruction_with_crs, augment_prompt_with_llm, enhanced_score_candidates,
    run_collaboration, run_single, AssistPayload, AssistSource, BackendId, CollabContext,
    CollabDirection, CopyAssistCrs, Participant, TrainableCrs, VariantName, CRS_RESULT_LABEL,
};
use crsllm::corpus::{generate_synthetic_corpus, Role, SemanticFrame, SyntheticSpec};
use crsllm::crs::{
    decode_prompt, parse_structured_output, CrsSettings, PromptVariant, RecommendationHead,
    RecommendationScores, TrainingSchedule, UnifiedCrs,
};
use crsllm::eval::{
    aggregate_human, distinct_1, evaluate, prf1, rank_metrics, AnnotationRecord, Prediction,
    RankInput, ACCURACY, F1, HIT_AT_5, MRR_AT_5, PRECISION, RECALL,
};
use crsllm::experiment::{run_matrix, BackendSpec, ExperimentConfig};
use crsllm::llm::{
    build_instruction_sample, parse_llm_output, ExternalConfig, ExternalLlm, LLMBackend,
    NoisyOracleLlm, OracleLlm, TemplateSet,
};
use crsllm::{Error, TaskInstance, TaskKind};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- oracles

fn oracle_prf(pred: &[u8], gold: &[u8]) -> (f64, f64, f64) {
    let mut p = pred.to_vec();
    p.sort_unstable();
    p.dedup();
    let mut g = gold.to_vec();
    g.sort_unstable();
    g.dedup();
    let matched = p.iter().filter(|x| g.contains(x)).count() as f64;
    let prec = if p.is_empty() {
        0.0
    } else {
        matched / p.len() as f64
    };
    let rec = if g.is_empty() {
        0.0
    } else {
        matched / g.len() as f64
    };
    let f1 = if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    };
    (prec, rec, f1)
}

/// Rank of `gold`: one plus the candidates scored strictly higher, plus
/// equal-scored candidates with a smaller id.
fn oracle_rank(ids: &[String], probs: &[f64], gold: usize) -> usize {
    1 + (0..ids.len())
        .filter(|&j| probs[j] > probs[gold] || (probs[j] == probs[gold] && ids[j] < ids[gold]))
        .count()
}

fn oracle_distinct(responses: &[Vec<String>]) -> f64 {
    let mut sum = 0.0;
    for r in responses {
        let mut unique = 0;
        for (i, w) in r.iter().enumerate() {
            if !r[..i].contains(w) {
                unique += 1;
            }
        }
        sum += unique as f64 / r.len() as f64;
    }
    sum / responses.len() as f64
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());

    for _ in 0..1000 {
        let pred: Vec<u8> = (0..rng.gen_range(0..8))
            .map(|_| rng.gen_range(0..10))
            .collect();
        let gold: Vec<u8> = (0..rng.gen_range(0..8))
            .map(|_| rng.gen_range(0..10))
            .collect();
        let got = prf1(&pred, &gold);
        let want = oracle_prf(&pred, &gold);
        track(got.precision, want.0);
        track(got.recall, want.1);
        track(got.f1, want.2);
    }

    // Pooled P/R/F1 through the evaluator on corpus instances.
    let corpus = common::default_corpus();
    let und = common::all_instances(&corpus, TaskKind::Understanding);
    let vocab: Vec<SemanticFrame> = und
        .iter()
        .flat_map(|i| i.gold_frames().unwrap().to_vec())
        .take(40)
        .collect();
    for _ in 0..50 {
        let subset: Vec<TaskInstance> = und.iter().filter(|_| rng.gen_bool(0.1)).cloned().collect();
        let mut preds = HashMap::new();
        let (mut m, mut np, mut ng) = (0usize, 0usize, 0usize);
        for inst in &subset {
            let mut p: Vec<SemanticFrame> = inst
                .gold_frames()
                .unwrap()
                .iter()
                .filter(|_| rng.gen_bool(0.6))
                .cloned()
                .collect();
            for _ in 0..rng.gen_range(0..3) {
                p.push(vocab[rng.gen_range(0..vocab.len())].clone());
            }
            let mut pu = p.clone();
            pu.sort_by(|a, b| (&a.attribute, &a.value).cmp(&(&b.attribute, &b.value)));
            pu.dedup();
            let mut gu = inst.gold_frames().unwrap().to_vec();
            gu.sort_by(|a, b| (&a.attribute, &a.value).cmp(&(&b.attribute, &b.value)));
            gu.dedup();
            m += pu.iter().filter(|f| gu.contains(f)).count();
            np += pu.len();
            ng += gu.len();
            preds.insert(inst.key(), Prediction::Frames(p));
        }
        let rep =
            evaluate(TaskKind::Understanding, "c", &subset, &preds).map_err(|e| e.to_string())?;
        let prec = if np == 0 { 0.0 } else { m as f64 / np as f64 };
        let rec = if ng == 0 { 0.0 } else { m as f64 / ng as f64 };
        let f1 = if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        track(rep.get(PRECISION).unwrap(), prec);
        track(rep.get(RECALL).unwrap(), rec);
        track(rep.get(F1).unwrap(), f1);
    }

    for _ in 0..1000 {
        let n = rng.gen_range(1..=20);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=4) as f64).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let gold = rng.gen_range(0..n);
        let scores =
            RecommendationScores::new(ids.clone(), probs.clone()).map_err(|e| e.to_string())?;
        let got =
            rank_metrics(RankInput::Scores(&scores), &ids[gold], 5).map_err(|e| e.to_string())?;
        let rank = oracle_rank(&ids, &probs, gold);
        track(got.accuracy, if rank == 1 { 1.0 } else { 0.0 });
        track(got.hit.unwrap(), if rank <= 5 { 1.0 } else { 0.0 });
        track(
            got.mrr.unwrap(),
            if rank <= 5 { 1.0 / rank as f64 } else { 0.0 },
        );

        let choice = (rng.gen_range(0..=n))
            .checked_sub(1)
            .map(|i| ids[i].as_str());
        let single = rank_metrics(
            RankInput::Single {
                choice,
                candidates: &ids,
            },
            &ids[gold],
            5,
        )
        .map_err(|e| e.to_string())?;
        track(
            single.accuracy,
            if choice == Some(ids[gold].as_str()) {
                1.0
            } else {
                0.0
            },
        );
        ensure!(
            single.hit.is_none() && single.mrr.is_none(),
            "single choice produced a ranking metric"
        );
    }

    for _ in 0..1000 {
        let responses: Vec<Vec<String>> = (0..rng.gen_range(1..6))
            .map(|_| {
                (0..rng.gen_range(1..10))
                    .map(|_| format!("w{}", rng.gen_range(0..8)))
                    .collect()
            })
            .collect();
        track(
            distinct_1(&responses).map_err(|e| e.to_string())?,
            oracle_distinct(&responses),
        );
    }

    for _ in 0..1000 {
        let methods = ["m1", "m2", "m3"];
        let mut records = Vec::new();
        let mut sums: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
        for k in 0..rng.gen_range(1..15) {
            let m = methods[rng.gen_range(0..3)];
            let (i, r) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            records.push(
                AnnotationRecord::new("a", m, format!("d{k}"), "t", i, r, 0)
                    .map_err(|e| e.to_string())?,
            );
            let s = sums.entry(m).or_default();
            s.0 += i as f64;
            s.1 += r as f64;
            s.2 += 1.0;
        }
        for (m, (i, r, n)) in sums {
            let (mi, mr) = aggregate_human(&records, m).map_err(|e| e.to_string())?;
            track(mi, i / n);
            track(mr, r / n);
        }
    }

    let elapsed = start.elapsed();
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("max |diff| {worst:e} in {elapsed:.2?}"))
}

// ---------------------------------------------------------- serialization

fn check_decoded(inst: &TaskInstance, variant: PromptVariant, text: &str) -> Result<(), String> {
    let d = decode_prompt(text);
    let current = usize::from(inst.current.is_some());
    ensure!(
        d.turns.len() == inst.context.len() + current,
        "{}: turn count",
        inst.key()
    );
    for (dt, t) in d.turns.iter().zip(&inst.context) {
        ensure!(
            dt.role == Some(t.role()) && dt.text == t.utterance.text.trim(),
            "{}: turn text",
            inst.key()
        );
        ensure!(dt.frames == t.frames, "{}: frames", inst.key());
        let sys = t.role() == Role::System;
        let elicit: &[String] = if sys && variant == PromptVariant::Elicitation {
            &t.elicit_attributes
        } else {
            &[]
        };
        let rec: &[String] = if sys && variant == PromptVariant::Recommendation {
            &t.recommended_products
        } else {
            &[]
        };
        ensure!(
            dt.elicit == elicit && dt.recommend == rec,
            "{}: elicit/recommend segments",
            inst.key()
        );
    }
    if let Some(cur) = &inst.current {
        let last = d.turns.last().unwrap();
        ensure!(
            last.text == cur.utterance.text.trim() && last.frames.is_empty(),
            "{}: current turn",
            inst.key()
        );
    }
    if variant == PromptVariant::Generation {
        ensure!(
            d.tail_elicit == inst.guide_attributes && d.tail_recommend == inst.guide_products,
            "{}: guidance",
            inst.key()
        );
    }
    Ok(())
}

fn serialization_closure() -> Outcome {
    let corpus = common::default_corpus();
    ensure!(
        corpus.split.len() == 200,
        "corpus has {} dialogues",
        corpus.split.len()
    );
    let templates = TemplateSet::builtin("en").map_err(|e| e.to_string())?;
    let crs = UnifiedCrs::tiny([&corpus.catalog], CrsSettings::default());
    let dim = crs.embeddings.dim();
    let mut checked = 0usize;
    for kind in TaskKind::ALL {
        for inst in common::all_instances(&corpus, kind) {
            let key = inst.key();
            let seq = crs.prompt_for(&inst).map_err(|e| e.to_string())?;
            check_decoded(&inst, seq.variant, &seq.text)?;

            // LLM-assisted CRS input.
            let llm_gold = AssistPayload::gold(&inst, AssistSource::Llm, |_| vec![0.0; dim]);
            if seq.variant != PromptVariant::Recommendation {
                let aug = augment_prompt_with_llm(&seq, &llm_gold).map_err(|e| e.to_string())?;
                check_decoded(&inst, seq.variant, &aug.text)?;
                let body = decode_prompt(&aug.text).llm.unwrap_or_default();
                let ok = match kind {
                    TaskKind::Understanding => {
                        parse_structured_output(&body, kind).frames == inst.gold_frames().unwrap()
                    }
                    TaskKind::Elicitation => {
                        parse_structured_output(&body, kind).attributes
                            == inst.gold_attributes().unwrap()
                    }
                    _ => body == inst.gold_response().unwrap().trim(),
                };
                ensure!(ok, "{key}: [LLM] segment does not parse back");
            }

            // Instruction build, output parse, and the CRS-assisted section.
            let sample = build_instruction_sample(&inst, &corpus.catalog.category, &templates)
                .map_err(|e| e.to_string())?;
            let parsed = parse_llm_output(&sample.output, kind, &sample.candidates);
            let crs_gold = AssistPayload::gold(&inst, AssistSource::Crs, |_| Vec::new());
            let aug =
                augment_instruction_with_crs(&sample, &crs_gold).map_err(|e| e.to_string())?;
            let section = aug
                .input
                .rsplit_once(&format!("\n{CRS_RESULT_LABEL}"))
                .map(|(_, s)| s.to_string())
                .ok_or(format!("{key}: no CRS section"))?;
            let ok = match kind {
                TaskKind::Understanding => {
                    let gold = inst.gold_frames().unwrap();
                    parsed.frames == gold
                        && (gold.is_empty()
                            || parse_structured_output(&section, kind).frames == gold)
                }
                TaskKind::Elicitation => {
                    let gold = inst.gold_attributes().unwrap();
                    parsed.attributes == gold
                        && parse_structured_output(&section, kind).attributes == gold
                }
                TaskKind::Recommendation => {
                    let gold = inst.gold_product().unwrap();
                    let first = section.split(", ").next().and_then(|l| l.chars().next());
                    parsed.product_id.as_deref() == Some(gold)
                        && parsed.letter == inst.label_of(gold)
                        && first == inst.label_of(gold)
                        && section.split(", ").count() == sample.candidates.len()
                }
                TaskKind::Generation => {
                    let gold = inst.gold_response().unwrap().trim();
                    parsed.response.as_deref() == Some(gold) && section == gold
                }
            };
            ensure!(ok, "{key}: instruction round trip");
            checked += 1;
        }
    }
    Ok(format!("{checked}/{checked} instances round-trip"))
}

// --------------------------------------------------------- structural facts

fn structural_facts() -> Outcome {
    let corpus = common::default_corpus();
    let templates = TemplateSet::builtin("en").map_err(|e| e.to_string())?;
    let labels: Vec<char> = ('A'..='T').collect();
    let rec = common::all_instances(&corpus, TaskKind::Recommendation);
    for inst in &rec {
        let s = build_instruction_sample(inst, &corpus.catalog.category, &templates)
            .map_err(|e| e.to_string())?;
        ensure!(
            s.candidates.len() == 20,
            "{}: {} candidates",
            inst.key(),
            s.candidates.len()
        );
        ensure!(
            s.labels() == labels,
            "{}: labels {:?}",
            inst.key(),
            s.labels()
        );
        let gold = inst.gold_product().unwrap();
        ensure!(
            s.candidates.iter().any(|(_, id)| id == gold),
            "{}: gold missing",
            inst.key()
        );
    }

    let prompts = [
        (TaskKind::Understanding, "Identify attributes and values:"),
        (TaskKind::Elicitation, "Select an attribute to ask:"),
        (TaskKind::Generation, "Generate a response:"),
    ];
    for (kind, text) in prompts {
        let got = crsllm::crs::make_task_prompt(kind).map_err(|e| e.to_string())?;
        ensure!(got == text, "{kind} prompt is {got:?}");
    }
    ensure!(
        crsllm::crs::make_task_prompt(TaskKind::Recommendation).is_err(),
        "recommendation has a prompt"
    );

    use BackendId::*;
    use CollabDirection::*;
    let expected = [
        ("CLLM-BCRS", Cllm, Bcrs, LlmAssistsCrs),
        ("CLLM-CCRS", Cllm, Ccrs, LlmAssistsCrs),
        ("ALLM-BCRS", Allm, Bcrs, LlmAssistsCrs),
        ("ALLM-CCRS", Allm, Ccrs, LlmAssistsCrs),
        ("BCRS-CLLM", Bcrs, Cllm, CrsAssistsLlm),
        ("CCRS-CLLM", Ccrs, Cllm, CrsAssistsLlm),
        ("BCRS-ALLM", Bcrs, Allm, CrsAssistsLlm),
        ("CCRS-ALLM", Ccrs, Allm, CrsAssistsLlm),
    ];
    for (name, a, b, d) in expected {
        let v: VariantName = name.parse().map_err(|e: Error| e.to_string())?;
        ensure!(v.route() == (a, b, d), "{name} routes to {:?}", v.route());
        ensure!(v.to_string() == name, "{name} renders as {v}");
    }
    Ok(format!(
        "{} recommendation samples, 3 prompts, 8 variants",
        rec.len()
    ))
}

// ------------------------------------------------- collaboration invariants

fn collaboration_invariants() -> Outcome {
    let corpus = common::default_corpus();
    let templates = TemplateSet::builtin("en").map_err(|e| e.to_string())?;
    let mut crs = UnifiedCrs::tiny([&corpus.catalog], CrsSettings::default());
    // Non-zero assist weights so the reduction is not trivially true.
    let (item, ctx) = (crs.head.item_dim(), crs.head.context_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand_vec = |n: usize| {
        (0..n)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    crs.head = RecommendationHead::from_parts(
        item,
        ctx,
        rand_vec(item * ctx),
        rand_vec(item * item),
        rand_vec(item),
    )
    .map_err(|e| e.to_string())?;
    let dim = crs.embeddings.dim();

    let (mut crs_checked, mut llm_checked, mut zero_checked) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for kind in TaskKind::ALL {
        for inst in common::all_instances(&corpus, kind) {
            let key = inst.key();
            let sample = build_instruction_sample(&inst, &corpus.catalog.category, &templates)
                .map_err(|e| e.to_string())?;
            let payload = AssistPayload::gold(&inst, AssistSource::Crs, |_| Vec::new());
            let aug = augment_instruction_with_crs(&sample, &payload).map_err(|e| e.to_string())?;
            ensure!(
                aug.input.starts_with(&sample.input)
                    && aug.instruction.starts_with(&sample.instruction),
                "{key}: CRS assist prefix"
            );
            ensure!(
                augment_instruction_with_crs(&aug, &payload).is_err(),
                "{key}: CRS assist applied twice"
            );
            crs_checked += 1;

            let seq = crs.prompt_for(&inst).map_err(|e| e.to_string())?;
            if kind == TaskKind::Recommendation {
                let ids: Vec<String> = inst
                    .candidates
                    .iter()
                    .map(|c| c.product.product_id.clone())
                    .collect();
                let failed = parse_llm_output("no idea", kind, &sample.candidates);
                let zero = AssistPayload::from_llm(&failed, |p| {
                    p.map(|id| crs.embeddings.get(id).unwrap().to_vec())
                        .unwrap_or_else(|| vec![0.0; dim])
                });
                ensure!(
                    zero.assist_embedding.as_deref() == Some(&vec![0.0; dim][..]),
                    "{key}: unparsed ê is not zero"
                );
                let plain = crs
                    .score_candidates(&seq, &ids, None)
                    .map_err(|e| e.to_string())?;
                let enhanced = enhanced_score_candidates(&crs, &seq, &ids, &zero)
                    .map_err(|e| e.to_string())?;
                for (a, b) in plain.probabilities.iter().zip(&enhanced.probabilities) {
                    worst = worst.max((a - b).abs());
                }
                ensure!(
                    augment_prompt_with_llm(&seq, &zero).is_err(),
                    "{key}: [LLM] segment on X_R"
                );
                zero_checked += 1;
            } else {
                let payload = AssistPayload::gold(&inst, AssistSource::Llm, |_| Vec::new());
                let aug = augment_prompt_with_llm(&seq, &payload).map_err(|e| e.to_string())?;
                ensure!(
                    aug.text.starts_with(&seq.text) && aug.task_prompt == seq.task_prompt,
                    "{key}: LLM assist prefix"
                );
                ensure!(
                    augment_prompt_with_llm(&aug, &payload).is_err(),
                    "{key}: LLM assist applied twice"
                );
                llm_checked += 1;
            }
        }
    }
    ensure!(worst <= 1e-12, "zero-assist deviation {worst:e}");
    Ok(format!(
        "{crs_checked} CRS-assist, {llm_checked} LLM-assist, {zero_checked} zero-assist checks; max |diff| {worst:e}"
    ))
}

// ------------------------------------------------------------ oracle matrix

fn oracle_matrix() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig::default();
    config.backends = BackendId::ALL
        .iter()
        .map(|&id| (id, BackendSpec::Oracle))
        .collect();
    config.output_dir = dir.path().to_path_buf();
    config.workers = 4;
    let records = run_matrix(&config).map_err(|e| e.to_string())?;
    ensure!(records.len() == 4 * (8 + 4), "{} records", records.len());
    let mut metrics = 0;
    for r in &records {
        let rep = r
            .report
            .as_ref()
            .ok_or(format!("{} {}: {:?}", r.method, r.task, r.error))?;
        for (m, v) in &rep.values {
            ensure!(*v == 1.0, "{} {} {m} = {v}", r.method, r.task);
            metrics += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "{} records, {metrics} metrics all 1.0 in {elapsed:.2?}",
        records.len()
    ))
}

// ---------------------------------------------------------- noise propagation

fn noise_propagation() -> Outcome {
    let spec = SyntheticSpec {
        dialogues: 2000,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)
        .map_err(|e| e.to_string())?
        .remove(0);
    let templates = TemplateSet::builtin("en").map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (kind, metric) in [
        (TaskKind::Understanding, F1),
        (TaskKind::Elicitation, F1),
        (TaskKind::Recommendation, ACCURACY),
    ] {
        let mut all = common::all_instances(&corpus, kind);
        ensure!(all.len() >= 2000, "only {} {kind} instances", all.len());
        all.truncate(2000);
        let samples: Vec<_> = all
            .iter()
            .map(|i| build_instruction_sample(i, &corpus.catalog.category, &templates))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let noisy = NoisyOracleLlm::new(&samples, 0.7, 3).map_err(|e| e.to_string())?;
        let ctx = CollabContext {
            kind,
            category: &corpus.catalog.category,
            templates: &templates,
            train: &[],
            test: &all,
            gold_assist: false,
        };
        let assister = Participant::Llm(Box::new(noisy));
        let mut assisted = Participant::Crs(Box::new(CopyAssistCrs));
        let out = run_collaboration(
            VariantName::CllmBcrs,
            &ctx,
            Some(&assister),
            Some(&mut assisted),
        )
        .map_err(|e| e.to_string())?;
        let rep = evaluate(kind, "x", &all, &out.predictions).map_err(|e| e.to_string())?;
        let v = rep.get(metric).unwrap();
        ensure!(close(v, 0.7, 0.03), "{kind} {metric} = {v:.4}");
        parts.push(format!("{kind} {metric} {v:.4}"));
    }
    Ok(format!("n=2000 each: {}", parts.join(", ")))
}

// ------------------------------------------------------------ toy training

fn toy_training() -> Outcome {
    let start = Instant::now();
    let corpus = common::default_corpus();
    ensure!(
        corpus.catalog.category.attribute_schema.len() == 5
            && corpus.catalog.len() == 50
            && corpus.split.len() == 200,
        "corpus shape differs from 5/50/200"
    );
    let templates = TemplateSet::builtin("en").map_err(|e| e.to_string())?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in TaskKind::ALL {
        let (a, b) = common::split_instances(&corpus, kind);
        train.extend(a);
        test.extend(b);
    }
    let schedule = TrainingSchedule {
        warmup_epochs: 10,
        joint_epochs: 10,
        ..Default::default()
    };
    let ctx = CollabContext {
        kind: TaskKind::Understanding,
        category: &corpus.catalog.category,
        templates: &templates,
        train: &train,
        test: &test,
        gold_assist: false,
    };
    let fresh = || {
        Participant::Crs(Box::new(TrainableCrs::new(
            "BCRS",
            UnifiedCrs::tiny([&corpus.catalog], CrsSettings::default()),
            schedule,
        )))
    };

    let mut base = fresh();
    let und = run_single(&ctx, &mut base).map_err(|e| e.to_string())?;
    let und_f1 = evaluate(TaskKind::Understanding, "x", &test, &und.predictions)
        .map_err(|e| e.to_string())?
        .get(F1)
        .unwrap();
    let Participant::Crs(base_crs) = &base else {
        unreachable!()
    };
    let curve = base_crs
        .training_report()
        .ok_or("no training report")?
        .warmup_curve();
    ensure!(curve.len() == 10, "{} warm-up epochs", curve.len());
    let best = curve.iter().copied().fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / curve[0];

    let rec_ctx = ctx.with_kind(TaskKind::Recommendation);
    let rec = crsllm::collab::predict_alone(&rec_ctx, &base).map_err(|e| e.to_string())?;
    let hit = evaluate(TaskKind::Recommendation, "x", &test, &rec.predictions)
        .map_err(|e| e.to_string())?
        .get(HIT_AT_5)
        .unwrap();

    let rec_samples: Vec<_> = train
        .iter()
        .chain(&test)
        .filter(|i| i.kind() == TaskKind::Recommendation)
        .map(|i| build_instruction_sample(i, &corpus.catalog.category, &templates))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let gold_ctx = CollabContext {
        gold_assist: true,
        ..rec_ctx
    };
    let llm = Participant::Llm(Box::new(OracleLlm::new(&rec_samples)));
    let mut assisted = fresh();
    let out = run_collaboration(
        VariantName::CllmBcrs,
        &gold_ctx,
        Some(&llm),
        Some(&mut assisted),
    )
    .map_err(|e| e.to_string())?;
    let assisted_rep = evaluate(TaskKind::Recommendation, "x", &test, &out.predictions)
        .map_err(|e| e.to_string())?;
    let assisted_hit = assisted_rep.get(HIT_AT_5).unwrap();

    let elapsed = start.elapsed();
    let summary = format!(
        "L_R drop {:.1}%, understanding F1 {und_f1:.4}, Hit@5 {hit:.4}, gold-assist Hit@5 {assisted_hit:.4} (MRR@5 {:.4}), {elapsed:.1?}",
        drop * 100.0,
        assisted_rep.get(MRR_AT_5).unwrap()
    );
    ensure!(drop >= 0.5, "{summary}: warm-up loss fell too little");
    ensure!(und_f1 >= 0.90, "{summary}: understanding F1 too low");
    ensure!(hit >= 0.60, "{summary}: Hit@5 too low");
    ensure!(assisted_hit >= hit, "{summary}: gold assist reduced Hit@5");
    ensure!(elapsed <= Duration::from_secs(600), "{summary}: too slow");
    Ok(summary)
}

// ---------------------------------------------------- external robustness

fn external_robustness() -> Outcome {
    use common::stub::{completion, spawn};
    let config = |url: &str| {
        let mut c = ExternalConfig::new(url, "stub");
        c.backoff_ms = 5;
        c.timeout_secs = 5;
        c.api_key_env = "CRSLLM_ACCEPTANCE_UNSET".into();
        c
    };

    let failing = spawn(|_| (500, "{}".into()), Duration::ZERO);
    let mut c = config(&failing.url);
    c.max_attempts = 4;
    match ExternalLlm::new(c)
        .map_err(|e| e.to_string())?
        .complete("i", "x")
    {
        Err(Error::Transport {
            status: Some(500),
            attempts: 4,
            ..
        }) => {}
        other => return Err(format!("persistent 500 gave {other:?}")),
    }
    ensure!(
        failing.hits() == 4,
        "{} requests for 4 attempts",
        failing.hits()
    );

    let slow = spawn(|_| completion("A"), Duration::from_millis(60));
    let mut c = config(&slow.url);
    c.max_concurrent = 3;
    let llm = Arc::new(ExternalLlm::new(c).map_err(|e| e.to_string())?);
    let handles: Vec<_> = (0..12)
        .map(|i| {
            let llm = llm.clone();
            thread::spawn(move || llm.complete("i", &i.to_string()))
        })
        .collect();
    for h in handles {
        h.join()
            .map_err(|_| "worker panicked")?
            .map_err(|e| e.to_string())?;
    }
    ensure!(
        slow.max_in_flight() <= 3,
        "{} requests in flight with cap 3",
        slow.max_in_flight()
    );

    let ok = spawn(|_| completion("B"), Duration::ZERO);
    let mut c = config(&ok.url);
    c.requests_per_minute = 5;
    let llm = ExternalLlm::new(c).map_err(|e| e.to_string())?;
    for _ in 0..5 {
        llm.complete("i", "x").map_err(|e| e.to_string())?;
    }
    ensure!(
        matches!(llm.complete("i", "x"), Err(Error::Throttled(_))),
        "no throttling after budget"
    );
    ensure!(ok.hits() == 5, "throttled call reached the server");

    Ok(format!(
        "retry-then-fail after 4, peak in-flight {}/3, throttled at 6th call",
        slow.max_in_flight()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle equivalence", metric_oracles),
        ("serialization and parsing closure", serialization_closure),
        ("structural facts", structural_facts),
        ("collaboration invariants", collaboration_invariants),
        ("oracle end-to-end matrix", oracle_matrix),
        ("noise propagation", noise_propagation),
        ("toy training", toy_training),
        ("external backend robustness", external_robustness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

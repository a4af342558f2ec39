//! Task metrics, their aggregation over categories and human-score means.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_label, SemanticFrame};
use crate::crs::{CrsOutput, CrsPrediction, RecommendationScores};
use crate::error::{Error, Result};
use crate::llm::LLMPrediction;
use crate::tasks::{InstanceKey, TaskInstance, TaskKind};

pub const PRECISION: &str = "P";
pub const RECALL: &str = "R";
pub const F1: &str = "F1";
pub const ACCURACY: &str = "Accuracy";
pub const HIT_AT_5: &str = "Hit@5";
pub const MRR_AT_5: &str = "MRR@5";
pub const DISTINCT_1: &str = "Distinct-1";
pub const INFORMATIVENESS: &str = "Info.";
pub const RELEVANCE: &str = "Rel.";

/// Cut-off for the ranking metrics.
pub const RANK_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, zero when both are zero.
pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Set-based precision, recall and F1. Duplicates count once.
pub fn prf1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Prf {
    let c = PrfCounts::of(pred, gold);
    c.prf()
}

/// Counts behind [`prf1`], additive over instances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PrfCounts {
    pub fn of<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Self {
        let p: std::collections::HashSet<&T> = pred.iter().collect();
        let g: std::collections::HashSet<&T> = gold.iter().collect();
        PrfCounts {
            matched: p.intersection(&g).count(),
            predicted: p.len(),
            gold: g.len(),
        }
    }

    pub fn add(&mut self, other: PrfCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self) -> Prf {
        let precision = ratio(self.matched as f64, self.predicted as f64);
        let recall = ratio(self.matched as f64, self.gold as f64);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// What a recommender produced for one instance.
#[derive(Debug, Clone, Copy)]
pub enum RankInput<'a> {
    Scores(&'a RecommendationScores),
    /// A single chosen product (or none, after a parse failure) among
    /// `candidates`.
    Single {
        choice: Option<&'a str>,
        candidates: &'a [String],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub accuracy: f64,
    /// Absent for single predictions.
    pub hit: Option<f64>,
    pub mrr: Option<f64>,
}

/// Accuracy (Hit@1), Hit@K and MRR@K of the gold product.
pub fn rank_metrics(input: RankInput<'_>, gold: &str, k: usize) -> Result<RankMetrics> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    match input {
        RankInput::Scores(s) => {
            let rank = s.rank_of(gold).ok_or_else(|| {
                Error::InvalidArgument(format!("gold {gold:?} is not a candidate"))
            })?;
            Ok(RankMetrics {
                accuracy: if rank == 1 { 1.0 } else { 0.0 },
                hit: Some(if rank <= k { 1.0 } else { 0.0 }),
                mrr: Some(if rank <= k { 1.0 / rank as f64 } else { 0.0 }),
            })
        }
        RankInput::Single { choice, candidates } => {
            if !candidates.iter().any(|c| c == gold) {
                return Err(Error::InvalidArgument(format!(
                    "gold {gold:?} is not a candidate"
                )));
            }
            Ok(RankMetrics {
                accuracy: if choice == Some(gold) { 1.0 } else { 0.0 },
                hit: None,
                mrr: None,
            })
        }
    }
}

/// Mean over responses of distinct unigrams over total unigrams.
pub fn distinct_1<S: AsRef<str>>(responses: &[Vec<S>]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::InvalidArgument("no responses".into()));
    }
    let mut sum = 0.0;
    for r in responses {
        sum += distinct_fraction(r)?;
    }
    Ok(sum / responses.len() as f64)
}

fn distinct_fraction<S: AsRef<str>>(tokens: &[S]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty response".into()));
    }
    let set: BTreeSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
    Ok(set.len() as f64 / tokens.len() as f64)
}

/// Whitespace tokens of a response.
pub fn unigrams(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// One human judgement of a generated response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationRepr")]
pub struct AnnotationRecord {
    annotator_id: String,
    method_id: String,
    dialogue_id: String,
    response_text: String,
    informativeness: u8,
    relevance: u8,
    timestamp: u64,
}

#[derive(Deserialize)]
struct AnnotationRepr {
    annotator_id: String,
    method_id: String,
    dialogue_id: String,
    response_text: String,
    informativeness: i64,
    relevance: i64,
    timestamp: u64,
}

impl TryFrom<AnnotationRepr> for AnnotationRecord {
    type Error = Error;

    fn try_from(r: AnnotationRepr) -> Result<Self> {
        AnnotationRecord::new(
            r.annotator_id,
            r.method_id,
            r.dialogue_id,
            r.response_text,
            r.informativeness,
            r.relevance,
            r.timestamp,
        )
    }
}

fn score(name: &str, v: i64) -> Result<u8> {
    if (1..=5).contains(&v) {
        Ok(v as u8)
    } else {
        Err(Error::Validation(format!(
            "{name} must be an integer from 1 to 5, got {v}"
        )))
    }
}

impl AnnotationRecord {
    pub fn new(
        annotator_id: impl Into<String>,
        method_id: impl Into<String>,
        dialogue_id: impl Into<String>,
        response_text: impl Into<String>,
        informativeness: i64,
        relevance: i64,
        timestamp: u64,
    ) -> Result<Self> {
        Ok(AnnotationRecord {
            annotator_id: annotator_id.into(),
            method_id: method_id.into(),
            dialogue_id: dialogue_id.into(),
            response_text: response_text.into(),
            informativeness: score("informativeness", informativeness)?,
            relevance: score("relevance", relevance)?,
            timestamp,
        })
    }

    pub fn annotator_id(&self) -> &str {
        &self.annotator_id
    }
    pub fn method_id(&self) -> &str {
        &self.method_id
    }
    pub fn dialogue_id(&self) -> &str {
        &self.dialogue_id
    }
    pub fn response_text(&self) -> &str {
        &self.response_text
    }
    pub fn informativeness(&self) -> u8 {
        self.informativeness
    }
    pub fn relevance(&self) -> u8 {
        self.relevance
    }
    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    /// Idempotency key of the annotation store.
    pub fn key(&self) -> (String, String, String) {
        (
            self.annotator_id.clone(),
            self.method_id.clone(),
            self.dialogue_id.clone(),
        )
    }
}

/// Mean informativeness and relevance of a method over all annotators.
pub fn aggregate_human(records: &[AnnotationRecord], method_id: &str) -> Result<(f64, f64)> {
    let mine: Vec<&AnnotationRecord> = records
        .iter()
        .filter(|r| r.method_id == method_id)
        .collect();
    if mine.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no annotations for method {method_id:?}"
        )));
    }
    let n = mine.len() as f64;
    let info = mine.iter().map(|r| r.informativeness as f64).sum::<f64>() / n;
    let rel = mine.iter().map(|r| r.relevance as f64).sum::<f64>() / n;
    Ok((info, rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Pool instances across categories, then compute.
    Micro,
    /// Average per-category values.
    #[default]
    Macro,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(AggregationMode::Micro),
            "macro" => Ok(AggregationMode::Macro),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation mode {other:?}"
            ))),
        }
    }
}

/// Per-task metric values for one category (or "all").
///
/// `fractions` holds the numerator and denominator behind every ratio
/// metric so reports can be pooled; F1 is always derived from P and R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub category: String,
    pub values: BTreeMap<String, f64>,
    pub support: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AggregationMode>,
    #[serde(default)]
    pub fractions: BTreeMap<String, (f64, f64)>,
    /// Generated responses that failed to parse.
    #[serde(default)]
    pub parse_failures: usize,
}

impl MetricReport {
    fn from_fractions(
        task: TaskKind,
        category: &str,
        support: usize,
        fractions: BTreeMap<String, (f64, f64)>,
    ) -> Result<Self> {
        if support == 0 {
            return Err(Error::InvalidArgument(format!(
                "no {task} instances to evaluate"
            )));
        }
        let mut values: BTreeMap<String, f64> = fractions
            .iter()
            .map(|(k, (n, d))| (k.clone(), ratio(*n, *d)))
            .collect();
        if let (Some(p), Some(r)) = (values.get(PRECISION).copied(), values.get(RECALL).copied()) {
            values.insert(F1.to_string(), harmonic(p, r));
        }
        Ok(MetricReport {
            task,
            category: category.to_string(),
            values,
            support,
            mode: None,
            fractions,
            parse_failures: 0,
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }
}

/// A task-typed prediction from either kind of system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Frames(Vec<SemanticFrame>),
    Attributes(Vec<String>),
    Scores(RecommendationScores),
    /// Single recommended product; `None` when nothing parsed.
    Choice(Option<String>),
    Response(String),
}

impl Prediction {
    pub fn kind(&self) -> TaskKind {
        match self {
            Prediction::Frames(_) => TaskKind::Understanding,
            Prediction::Attributes(_) => TaskKind::Elicitation,
            Prediction::Scores(_) | Prediction::Choice(_) => TaskKind::Recommendation,
            Prediction::Response(_) => TaskKind::Generation,
        }
    }
}

impl From<CrsOutput> for Prediction {
    fn from(o: CrsOutput) -> Self {
        match o.prediction {
            CrsPrediction::Frames(f) => Prediction::Frames(f),
            CrsPrediction::Attributes(a) => Prediction::Attributes(a),
            CrsPrediction::Scores(s) => Prediction::Scores(s),
            CrsPrediction::Response(r) => Prediction::Response(r),
        }
    }
}

impl From<LLMPrediction> for Prediction {
    fn from(p: LLMPrediction) -> Self {
        match p.kind {
            TaskKind::Understanding => Prediction::Frames(p.frames),
            TaskKind::Elicitation => Prediction::Attributes(p.attributes),
            TaskKind::Recommendation => Prediction::Choice(p.product_id),
            TaskKind::Generation => Prediction::Response(p.response.unwrap_or_default()),
        }
    }
}

fn frame_key(f: &SemanticFrame) -> (String, String) {
    (normalize_label(&f.attribute), normalize_label(&f.value))
}

/// Score predictions for one task and category. A missing or mistyped
/// prediction counts as empty (understanding, elicitation), wrong
/// (recommendation) or an empty response (generation, Distinct-1 of 0).
pub fn evaluate(
    kind: TaskKind,
    category: &str,
    instances: &[TaskInstance],
    predictions: &HashMap<InstanceKey, Prediction>,
) -> Result<MetricReport> {
    let mut counts = PrfCounts::default();
    let (mut acc, mut hit, mut rr, mut ranked) = (0.0, 0.0, 0.0, 0usize);
    let mut distinct = 0.0;
    let mut failures = 0usize;
    let mut support = 0usize;
    for inst in instances.iter().filter(|i| i.kind() == kind) {
        support += 1;
        let pred = predictions.get(&inst.key());
        match kind {
            TaskKind::Understanding => {
                let gold: Vec<_> = inst
                    .gold_frames()
                    .unwrap_or_default()
                    .iter()
                    .map(frame_key)
                    .collect();
                let p: Vec<_> = match pred {
                    Some(Prediction::Frames(f)) => f.iter().map(frame_key).collect(),
                    _ => Vec::new(),
                };
                counts.add(PrfCounts::of(&p, &gold));
            }
            TaskKind::Elicitation => {
                let gold: Vec<String> = inst
                    .gold_attributes()
                    .unwrap_or_default()
                    .iter()
                    .map(|a| normalize_label(a))
                    .collect();
                let p: Vec<String> = match pred {
                    Some(Prediction::Attributes(a)) => {
                        a.iter().map(|x| normalize_label(x)).collect()
                    }
                    _ => Vec::new(),
                };
                counts.add(PrfCounts::of(&p, &gold));
            }
            TaskKind::Recommendation => {
                let gold = inst.gold_product().unwrap_or_default();
                let ids: Vec<String> = inst
                    .candidates
                    .iter()
                    .map(|c| c.product.product_id.clone())
                    .collect();
                let m = match pred {
                    Some(Prediction::Scores(s)) => {
                        rank_metrics(RankInput::Scores(s), gold, RANK_K)?
                    }
                    Some(Prediction::Choice(c)) => rank_metrics(
                        RankInput::Single {
                            choice: c.as_deref(),
                            candidates: &ids,
                        },
                        gold,
                        RANK_K,
                    )?,
                    _ => rank_metrics(
                        RankInput::Single {
                            choice: None,
                            candidates: &ids,
                        },
                        gold,
                        RANK_K,
                    )?,
                };
                if matches!(pred, Some(Prediction::Choice(None)) | None) {
                    failures += 1;
                }
                acc += m.accuracy;
                if let (Some(h), Some(r)) = (m.hit, m.mrr) {
                    hit += h;
                    rr += r;
                    ranked += 1;
                }
            }
            TaskKind::Generation => match pred {
                Some(Prediction::Response(r)) if !unigrams(r).is_empty() => {
                    distinct += distinct_fraction(&unigrams(r))?;
                }
                _ => failures += 1,
            },
        }
    }
    let mut fractions = BTreeMap::new();
    let n = support as f64;
    match kind {
        TaskKind::Understanding | TaskKind::Elicitation => {
            fractions.insert(
                PRECISION.to_string(),
                (counts.matched as f64, counts.predicted as f64),
            );
            fractions.insert(
                RECALL.to_string(),
                (counts.matched as f64, counts.gold as f64),
            );
        }
        TaskKind::Recommendation => {
            fractions.insert(ACCURACY.to_string(), (acc, n));
            // Hit@5 and MRR@5 only exist when every prediction is a ranking.
            if ranked == support {
                fractions.insert(HIT_AT_5.to_string(), (hit, n));
                fractions.insert(MRR_AT_5.to_string(), (rr, n));
            }
        }
        TaskKind::Generation => {
            fractions.insert(DISTINCT_1.to_string(), (distinct, n));
        }
    }
    let mut report = MetricReport::from_fractions(kind, category, support, fractions)?;
    report.parse_failures = failures;
    Ok(report)
}

/// Combine per-category reports of one task into an "all" report.
pub fn aggregate_categories(
    reports: &[MetricReport],
    mode: AggregationMode,
) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
    let metrics: BTreeSet<&String> = first.values.keys().collect();
    for r in reports {
        if r.task != first.task {
            return Err(Error::InvalidArgument(format!(
                "mixed tasks {} and {}",
                first.task, r.task
            )));
        }
        if r.values.keys().collect::<BTreeSet<_>>() != metrics {
            return Err(Error::InvalidArgument(format!(
                "category {} reports a different metric set",
                r.category
            )));
        }
    }
    let support = reports.iter().map(|r| r.support).sum();
    let mut fractions: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in reports {
        for (k, (n, d)) in &r.fractions {
            let e = fractions.entry(k.clone()).or_insert((0.0, 0.0));
            e.0 += n;
            e.1 += d;
        }
    }
    let mut out = MetricReport::from_fractions(first.task, "all", support, fractions)?;
    if mode == AggregationMode::Macro {
        let k = reports.len() as f64;
        out.values = metrics
            .iter()
            .map(|m| {
                (
                    (*m).clone(),
                    reports.iter().map(|r| r.values[*m]).sum::<f64>() / k,
                )
            })
            .collect();
    }
    out.mode = Some(mode);
    out.parse_failures = reports.iter().map(|r| r.parse_failures).sum();
    Ok(out)
}

//! Both collaboration directions and the eight named variants.
//!
//! A CRS assists an LLM through text: its prediction is appended to the
//! instruction sample together with an advisory sentence. An LLM assists a
//! CRS through an `[LLM]` prompt segment and, for recommendation, through
//! the embedding of the product it picked.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, SemanticFrame};
use crate::crs::prompt::{
    parse_structured_output, render_frames, render_list, AssistMark, SpecialToken,
};
use crate::crs::{
    seq_target, CrsOutput, CrsPrediction, PromptSequence, PromptVariant, RecommendationScores,
};
use crate::crs::{train_two_stage, TrainingData, TrainingReport, TrainingSchedule, UnifiedCrs};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::llm::TemplateSet;
use crate::llm::{
    build_instruction_sample, predict_sample, InstructionSample, LLMBackend, LLMPrediction,
};
use crate::tasks::{InstanceKey, TaskInstance, TaskKind};

/// Version tag of the advisory sentence and section label below.
pub const ADVISORY_VERSION: &str = "crs-assist-v1";
pub const ADVISORY_SENTENCE: &str =
    "A CRS has already worked on this task; take its result, given at the end of the input, into account.";
pub const CRS_RESULT_LABEL: &str = "CRS result: ";
pub const NO_RESULT: &str = "(no result)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollabDirection {
    None,
    CrsAssistsLlm,
    LlmAssistsCrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssistSource {
    Crs,
    Llm,
}

/// What one system hands to the other for a single instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistPayload {
    pub source: AssistSource,
    pub kind: TaskKind,
    /// The prediction in the shared output grammar.
    pub text_form: String,
    /// Full ranking, best first (CRS recommendation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranked_list: Option<Vec<(String, f64)>>,
    /// ê (LLM recommendation only); zero when the LLM output did not parse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_embedding: Option<Vec<f64>>,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_product: Option<String>,
}

impl AssistPayload {
    pub fn validate(&self) -> Result<()> {
        let rec = self.kind == TaskKind::Recommendation;
        if self.ranked_list.is_some() != (rec && self.source == AssistSource::Crs) {
            return Err(Error::Validation(
                "a ranked list is carried exactly by CRS recommendation payloads".into(),
            ));
        }
        if self.assist_embedding.is_some() != (rec && self.source == AssistSource::Llm) {
            return Err(Error::Validation(
                "an assist embedding is carried exactly by LLM recommendation payloads".into(),
            ));
        }
        Ok(())
    }

    /// Payload from a CRS prediction.
    pub fn from_crs(output: &CrsOutput) -> Self {
        let kind = output.kind();
        let (text_form, ranked_list, predicted_product) = match &output.prediction {
            CrsPrediction::Frames(f) => (render_frames(f), None, None),
            CrsPrediction::Attributes(a) => (render_list(a), None, None),
            CrsPrediction::Response(r) => (r.trim().to_string(), None, None),
            CrsPrediction::Scores(s) => {
                let ranked: Vec<(String, f64)> = s
                    .ranking()
                    .into_iter()
                    .map(|i| (s.candidates[i].clone(), s.probabilities[i]))
                    .collect();
                let text = ranked
                    .iter()
                    .map(|(id, _)| id.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                let top = ranked.first().map(|(id, _)| id.clone());
                (text, Some(ranked), top)
            }
        };
        AssistPayload {
            source: AssistSource::Crs,
            kind,
            text_form,
            ranked_list,
            assist_embedding: None,
            parse_ok: output.parse_ok,
            predicted_product,
        }
    }

    /// Payload from an LLM prediction. `embed` maps the predicted product to
    /// ê and must return the zero vector for `None`.
    pub fn from_llm(pred: &LLMPrediction, embed: impl Fn(Option<&str>) -> Vec<f64>) -> Self {
        let text_form = if !pred.parse_ok {
            String::new()
        } else {
            match pred.kind {
                TaskKind::Understanding => render_frames(&pred.frames),
                TaskKind::Elicitation => render_list(&pred.attributes),
                TaskKind::Recommendation => pred.letter.map(String::from).unwrap_or_default(),
                TaskKind::Generation => pred.response.clone().unwrap_or_default(),
            }
        };
        let product = if pred.parse_ok {
            pred.product_id.clone()
        } else {
            None
        };
        AssistPayload {
            source: AssistSource::Llm,
            kind: pred.kind,
            text_form,
            ranked_list: None,
            assist_embedding: (pred.kind == TaskKind::Recommendation)
                .then(|| embed(product.as_deref())),
            parse_ok: pred.parse_ok,
            predicted_product: product,
        }
    }

    /// A payload carrying the gold answer, for diagnostics.
    pub fn gold(
        instance: &TaskInstance,
        source: AssistSource,
        embed: impl Fn(Option<&str>) -> Vec<f64>,
    ) -> Self {
        let kind = instance.kind();
        let mut p = AssistPayload {
            source,
            kind,
            text_form: seq_target(instance).unwrap_or_default(),
            ranked_list: None,
            assist_embedding: None,
            parse_ok: true,
            predicted_product: None,
        };
        if kind == TaskKind::Recommendation {
            let gold = instance.gold_product().unwrap_or_default().to_string();
            match source {
                AssistSource::Crs => {
                    let mut ranked = vec![(gold.clone(), 1.0)];
                    ranked.extend(
                        instance
                            .candidates
                            .iter()
                            .filter(|c| c.product.product_id != gold)
                            .map(|c| (c.product.product_id.clone(), 0.0)),
                    );
                    p.text_form = ranked
                        .iter()
                        .map(|(id, _)| id.as_str())
                        .collect::<Vec<_>>()
                        .join(", ");
                    p.ranked_list = Some(ranked);
                }
                AssistSource::Llm => {
                    p.text_form = instance
                        .label_of(&gold)
                        .map(String::from)
                        .unwrap_or_default();
                    p.assist_embedding = Some(embed(Some(&gold)));
                }
            }
            p.predicted_product = Some(gold);
        }
        p
    }

    /// Structured reading of `text_form`.
    pub fn frames(&self) -> Vec<SemanticFrame> {
        parse_structured_output(&self.text_form, TaskKind::Understanding).frames
    }

    pub fn attributes(&self) -> Vec<String> {
        parse_structured_output(&self.text_form, TaskKind::Elicitation).attributes
    }
}

fn crs_section(sample: &InstructionSample, payload: &AssistPayload) -> Result<String> {
    if let Some(ranked) = &payload.ranked_list {
        let letters = ranked
            .iter()
            .map(|(id, _)| {
                sample
                    .candidates
                    .iter()
                    .find(|(_, c)| c == id)
                    .map(|(l, _)| l.to_string())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("ranked product {id:?} is not a candidate"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(letters.join(", "));
    }
    Ok(payload.text_form.trim().to_string())
}

/// Append a CRS result to an instruction sample.
pub fn augment_instruction_with_crs(
    sample: &InstructionSample,
    payload: &AssistPayload,
) -> Result<InstructionSample> {
    if payload.source != AssistSource::Crs {
        return Err(Error::InvalidArgument(
            "payload does not come from a CRS".into(),
        ));
    }
    if payload.kind != sample.kind {
        return Err(Error::InvalidArgument(format!(
            "{} payload for a {} sample",
            payload.kind, sample.kind
        )));
    }
    if sample.crs_assisted || sample.input.contains(&format!("\n{CRS_RESULT_LABEL}")) {
        return Err(Error::InvalidArgument(format!(
            "{} is already assisted",
            sample.key()
        )));
    }
    payload.validate()?;
    let mut section = crs_section(sample, payload)?;
    if section.is_empty() {
        section = NO_RESULT.to_string();
    }
    let mut out = sample.clone();
    out.instruction = format!("{} {ADVISORY_SENTENCE}", sample.instruction);
    out.input = format!("{}\n{CRS_RESULT_LABEL}{section}", sample.input);
    out.crs_assisted = true;
    Ok(out)
}

/// Append an `[LLM]` segment to a non-recommendation prompt sequence.
pub fn augment_prompt_with_llm(
    seq: &PromptSequence,
    payload: &AssistPayload,
) -> Result<PromptSequence> {
    if payload.source != AssistSource::Llm {
        return Err(Error::InvalidArgument(
            "payload does not come from an LLM".into(),
        ));
    }
    if seq.variant == PromptVariant::Recommendation {
        return Err(Error::InvalidArgument(
            "recommendation is assisted through the embedding, not the prompt".into(),
        ));
    }
    if payload.kind != seq.variant.kind() {
        return Err(Error::InvalidArgument(format!(
            "{} payload for a {:?} sequence",
            payload.kind, seq.variant
        )));
    }
    let marker = SpecialToken::Llm.as_str();
    if seq.assist.is_some() || seq.text.contains(marker) {
        return Err(Error::InvalidArgument(
            "sequence already carries an [LLM] segment".into(),
        ));
    }
    payload.validate()?;
    let rendered = if payload.parse_ok {
        payload.text_form.trim()
    } else {
        ""
    };
    let text = if rendered.is_empty() {
        format!("{} {marker}", seq.text)
    } else {
        format!("{} {marker} {rendered}", seq.text)
    };
    Ok(PromptSequence {
        variant: seq.variant,
        text,
        task_prompt: seq.task_prompt.clone(),
        assist: Some(AssistMark {
            flagged: !payload.parse_ok,
        }),
    })
}

/// Score candidates with the assist embedding of an LLM payload.
pub fn enhanced_score_candidates(
    crs: &UnifiedCrs,
    seq: &PromptSequence,
    candidates: &[String],
    payload: &AssistPayload,
) -> Result<RecommendationScores> {
    if payload.source != AssistSource::Llm || payload.kind != TaskKind::Recommendation {
        return Err(Error::InvalidArgument(
            "expected an LLM recommendation payload".into(),
        ));
    }
    let assist = payload
        .assist_embedding
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("payload has no assist embedding".into()))?;
    if assist.len() != crs.embeddings.dim() {
        return Err(Error::DimensionMismatch {
            expected: crs.embeddings.dim(),
            actual: assist.len(),
        });
    }
    crs.score_candidates(seq, candidates, Some(assist))
}

/// The four systems of the variant grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackendId {
    /// ChatGLM-style LLM.
    #[serde(rename = "CLLM")]
    Cllm,
    /// Chinese-Alpaca-style LLM.
    #[serde(rename = "ALLM")]
    Allm,
    /// BART-based CRS.
    #[serde(rename = "BCRS")]
    Bcrs,
    /// CPT-based CRS.
    #[serde(rename = "CCRS")]
    Ccrs,
}

impl BackendId {
    pub const ALL: [BackendId; 4] = [
        BackendId::Cllm,
        BackendId::Allm,
        BackendId::Bcrs,
        BackendId::Ccrs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendId::Cllm => "CLLM",
            BackendId::Allm => "ALLM",
            BackendId::Bcrs => "BCRS",
            BackendId::Ccrs => "CCRS",
        }
    }

    pub fn is_llm(self) -> bool {
        matches!(self, BackendId::Cllm | BackendId::Allm)
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackendId::ALL
            .into_iter()
            .find(|b| b.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backend id {s:?}")))
    }
}

/// An assister-assisted pair; the name reads assister first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantName {
    CllmBcrs,
    CllmCcrs,
    AllmBcrs,
    AllmCcrs,
    BcrsCllm,
    CcrsCllm,
    BcrsAllm,
    CcrsAllm,
}

impl VariantName {
    pub const ALL: [VariantName; 8] = [
        VariantName::CllmBcrs,
        VariantName::CllmCcrs,
        VariantName::AllmBcrs,
        VariantName::AllmCcrs,
        VariantName::BcrsCllm,
        VariantName::CcrsCllm,
        VariantName::BcrsAllm,
        VariantName::CcrsAllm,
    ];

    pub fn assister(self) -> BackendId {
        use BackendId::*;
        match self {
            VariantName::CllmBcrs | VariantName::CllmCcrs => Cllm,
            VariantName::AllmBcrs | VariantName::AllmCcrs => Allm,
            VariantName::BcrsCllm | VariantName::BcrsAllm => Bcrs,
            VariantName::CcrsCllm | VariantName::CcrsAllm => Ccrs,
        }
    }

    pub fn assisted(self) -> BackendId {
        use BackendId::*;
        match self {
            VariantName::CllmBcrs | VariantName::AllmBcrs => Bcrs,
            VariantName::CllmCcrs | VariantName::AllmCcrs => Ccrs,
            VariantName::BcrsCllm | VariantName::CcrsCllm => Cllm,
            VariantName::BcrsAllm | VariantName::CcrsAllm => Allm,
        }
    }

    pub fn direction(self) -> CollabDirection {
        if self.assister().is_llm() {
            CollabDirection::LlmAssistsCrs
        } else {
            CollabDirection::CrsAssistsLlm
        }
    }

    pub fn route(self) -> (BackendId, BackendId, CollabDirection) {
        (self.assister(), self.assisted(), self.direction())
    }

    pub fn render(self) -> String {
        format!("{}-{}", self.assister(), self.assisted())
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.trim().split_once('-').ok_or_else(|| {
            Error::InvalidArgument(format!("variant {s:?} is not ASSISTER-ASSISTED"))
        })?;
        let (a, b) = (a.parse::<BackendId>()?, b.parse::<BackendId>()?);
        VariantName::ALL
            .into_iter()
            .find(|v| v.assister() == a && v.assisted() == b)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("{s:?} pairs two systems of the same type"))
            })
    }
}

impl Serialize for VariantName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for VariantName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A CRS as seen by the collaboration runner.
pub trait CrsSystem: Send + Sync {
    fn name(&self) -> &str;

    /// Train on instances of any kind; `payloads` apply to the instances
    /// they are keyed by.
    fn train(
        &mut self,
        instances: &[TaskInstance],
        payloads: &HashMap<InstanceKey, AssistPayload>,
    ) -> Result<()>;

    fn predict(
        &self,
        instance: &TaskInstance,
        payload: Option<&AssistPayload>,
    ) -> Result<CrsOutput>;

    /// ê for a product; the zero vector for `None` or an unknown product.
    fn assist_embedding(&self, product_id: Option<&str>) -> Vec<f64>;

    fn deterministic(&self) -> bool {
        true
    }

    fn save(&self, _path: &Path) -> Result<()> {
        Err(Error::Unsupported(format!(
            "{} has no checkpoint format",
            self.name()
        )))
    }

    fn training_report(&self) -> Option<&TrainingReport> {
        None
    }
}

fn embedding_or_zero(crs: &UnifiedCrs, product_id: Option<&str>) -> Vec<f64> {
    product_id
        .and_then(|p| crs.embeddings.get(p).ok())
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; crs.embeddings.dim()])
}

/// The prompt sequence and assist vector of an instance under an optional
/// payload.
pub fn assisted_input(
    crs: &UnifiedCrs,
    instance: &TaskInstance,
    payload: Option<&AssistPayload>,
) -> Result<(PromptSequence, Option<Vec<f64>>)> {
    let seq = crs.prompt_for(instance)?;
    match payload {
        None => Ok((seq, None)),
        Some(p) if instance.kind() == TaskKind::Recommendation => {
            if p.source != AssistSource::Llm || p.kind != TaskKind::Recommendation {
                return Err(Error::InvalidArgument(
                    "expected an LLM recommendation payload".into(),
                ));
            }
            let e = p
                .assist_embedding
                .clone()
                .ok_or_else(|| Error::InvalidArgument("payload has no assist embedding".into()))?;
            if e.len() != crs.embeddings.dim() {
                return Err(Error::DimensionMismatch {
                    expected: crs.embeddings.dim(),
                    actual: e.len(),
                });
            }
            Ok((seq, Some(e)))
        }
        Some(p) => Ok((augment_prompt_with_llm(&seq, p)?, None)),
    }
}

/// The unified CRS with two-stage training.
#[derive(Debug)]
pub struct TrainableCrs {
    name: String,
    pub crs: UnifiedCrs,
    pub schedule: TrainingSchedule,
    report: Option<TrainingReport>,
}

impl TrainableCrs {
    pub fn new(name: impl Into<String>, crs: UnifiedCrs, schedule: TrainingSchedule) -> Self {
        TrainableCrs {
            name: name.into(),
            crs,
            schedule,
            report: None,
        }
    }
}

impl CrsSystem for TrainableCrs {
    fn name(&self) -> &str {
        &self.name
    }

    fn train(
        &mut self,
        instances: &[TaskInstance],
        payloads: &HashMap<InstanceKey, AssistPayload>,
    ) -> Result<()> {
        let mut data = TrainingData::default();
        for inst in instances {
            let (seq, assist) = assisted_input(&self.crs, inst, payloads.get(&inst.key()))?;
            data.push(inst, seq, assist)?;
        }
        self.report = Some(train_two_stage(&mut self.crs, &data, &self.schedule)?);
        Ok(())
    }

    fn predict(
        &self,
        instance: &TaskInstance,
        payload: Option<&AssistPayload>,
    ) -> Result<CrsOutput> {
        let (seq, assist) = assisted_input(&self.crs, instance, payload)?;
        self.crs.predict_sequence(instance, &seq, assist.as_deref())
    }

    fn assist_embedding(&self, product_id: Option<&str>) -> Vec<f64> {
        embedding_or_zero(&self.crs, product_id)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.crs.save(path)
    }

    fn training_report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }
}

/// A CRS that answers every instance with its gold; training is a no-op.
#[derive(Debug)]
pub struct GoldEchoCrs {
    pub crs: UnifiedCrs,
}

impl GoldEchoCrs {
    pub fn new(instances: &[TaskInstance], product_ids: Vec<String>) -> Result<Self> {
        Ok(GoldEchoCrs {
            crs: UnifiedCrs::gold_echo(instances, product_ids)?,
        })
    }
}

impl CrsSystem for GoldEchoCrs {
    fn name(&self) -> &str {
        "gold-echo"
    }

    fn train(
        &mut self,
        _instances: &[TaskInstance],
        _payloads: &HashMap<InstanceKey, AssistPayload>,
    ) -> Result<()> {
        Ok(())
    }

    /// Inputs are still built and checked; the answer is the instance's own
    /// gold, so identical texts with different golds stay apart.
    fn predict(
        &self,
        instance: &TaskInstance,
        payload: Option<&AssistPayload>,
    ) -> Result<CrsOutput> {
        assisted_input(&self.crs, instance, payload)?;
        let prediction = match instance.kind() {
            TaskKind::Understanding => {
                CrsPrediction::Frames(instance.gold_frames().unwrap_or_default().to_vec())
            }
            TaskKind::Elicitation => {
                CrsPrediction::Attributes(instance.gold_attributes().unwrap_or_default().to_vec())
            }
            TaskKind::Generation => {
                CrsPrediction::Response(instance.gold_response().unwrap_or_default().to_string())
            }
            TaskKind::Recommendation => {
                let gold = instance.gold_product().unwrap_or_default();
                let ids: Vec<String> = instance
                    .candidates
                    .iter()
                    .map(|c| c.product.product_id.clone())
                    .collect();
                let probs = ids
                    .iter()
                    .map(|id| if id == gold { 1.0 } else { 0.0 })
                    .collect();
                CrsPrediction::Scores(RecommendationScores::new(ids, probs)?)
            }
        };
        Ok(CrsOutput {
            raw_text: seq_target(instance),
            prediction,
            parse_ok: true,
            dropped: Vec::new(),
        })
    }

    fn assist_embedding(&self, product_id: Option<&str>) -> Vec<f64> {
        embedding_or_zero(&self.crs, product_id)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.crs.save(path)
    }
}

/// Returns the assisting payload as its own prediction; with no payload it
/// predicts nothing (uniform scores for recommendation).
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyAssistCrs;

impl CrsSystem for CopyAssistCrs {
    fn name(&self) -> &str {
        "copy-assist"
    }

    fn train(
        &mut self,
        _instances: &[TaskInstance],
        _payloads: &HashMap<InstanceKey, AssistPayload>,
    ) -> Result<()> {
        Ok(())
    }

    fn predict(
        &self,
        instance: &TaskInstance,
        payload: Option<&AssistPayload>,
    ) -> Result<CrsOutput> {
        let kind = instance.kind();
        if let Some(p) = payload {
            if p.kind != kind {
                return Err(Error::InvalidArgument(format!(
                    "{} payload for a {kind} instance",
                    p.kind
                )));
            }
        }
        let usable = payload.filter(|p| p.parse_ok);
        let prediction = match kind {
            TaskKind::Understanding => {
                CrsPrediction::Frames(usable.map(AssistPayload::frames).unwrap_or_default())
            }
            TaskKind::Elicitation => {
                CrsPrediction::Attributes(usable.map(AssistPayload::attributes).unwrap_or_default())
            }
            TaskKind::Generation => {
                CrsPrediction::Response(usable.map(|p| p.text_form.clone()).unwrap_or_default())
            }
            TaskKind::Recommendation => {
                let ids: Vec<String> = instance
                    .candidates
                    .iter()
                    .map(|c| c.product.product_id.clone())
                    .collect();
                let pick = usable.and_then(|p| p.predicted_product.as_deref());
                let probs = match pick.and_then(|id| ids.iter().position(|c| c == id)) {
                    Some(i) => (0..ids.len())
                        .map(|j| if j == i { 1.0 } else { 0.0 })
                        .collect(),
                    None => vec![1.0 / ids.len() as f64; ids.len()],
                };
                CrsPrediction::Scores(RecommendationScores::new(ids, probs)?)
            }
        };
        Ok(CrsOutput {
            prediction,
            raw_text: payload.map(|p| p.text_form.clone()),
            parse_ok: usable.is_some(),
            dropped: Vec::new(),
        })
    }

    fn assist_embedding(&self, _product_id: Option<&str>) -> Vec<f64> {
        Vec::new()
    }
}

/// A system taking part in a run.
pub enum Participant {
    Crs(Box<dyn CrsSystem>),
    Llm(Box<dyn LLMBackend>),
}

impl Participant {
    pub fn name(&self) -> &str {
        match self {
            Participant::Crs(c) => c.name(),
            Participant::Llm(l) => l.name(),
        }
    }

    pub fn deterministic(&self) -> bool {
        match self {
            Participant::Crs(c) => c.deterministic(),
            Participant::Llm(l) => l.deterministic(),
        }
    }
}

impl fmt::Debug for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Crs(c) => write!(f, "Crs({})", c.name()),
            Participant::Llm(l) => write!(f, "Llm({})", l.name()),
        }
    }
}

/// Data of one cell: the task under evaluation and a category's splits.
#[derive(Debug, Clone, Copy)]
pub struct CollabContext<'a> {
    pub kind: TaskKind,
    pub category: &'a Category,
    pub templates: &'a TemplateSet,
    /// Training instances of every kind; a CRS trains on all of them, an
    /// LLM on those of `kind`.
    pub train: &'a [TaskInstance],
    pub test: &'a [TaskInstance],
    /// Replace assister predictions by gold payloads.
    pub gold_assist: bool,
}

impl<'a> CollabContext<'a> {
    fn of_kind(&self, instances: &'a [TaskInstance]) -> Vec<&'a TaskInstance> {
        instances.iter().filter(|i| i.kind() == self.kind).collect()
    }

    pub fn with_kind(&self, kind: TaskKind) -> Self {
        CollabContext { kind, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a payload cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadRecord {
    pub split: Split,
    pub key: InstanceKey,
    pub payload: AssistPayload,
}

pub fn write_payload_cache(path: &Path, records: &[PayloadRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_payload_cache(path: &Path) -> Result<Vec<PayloadRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: PayloadRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        r.payload.validate().map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Predictions of one cell, plus what was fed to the evaluated system.
#[derive(Debug, Clone, Default)]
pub struct CollabOutcome {
    pub predictions: HashMap<InstanceKey, Prediction>,
    /// Input text the evaluated system saw for each test instance.
    pub inputs: HashMap<InstanceKey, String>,
    pub payloads: Vec<PayloadRecord>,
    /// Evaluated outputs that did not parse.
    pub parse_failures: usize,
    /// Assister outputs that did not parse.
    pub assist_failures: usize,
}

fn instruction_samples(
    ctx: &CollabContext,
    instances: &[&TaskInstance],
) -> Result<Vec<InstructionSample>> {
    instances
        .iter()
        .map(|i| build_instruction_sample(i, ctx.category, ctx.templates))
        .collect()
}

/// Fit a system without assistance: a CRS on every training instance, an
/// LLM on the training samples of `ctx.kind`.
pub fn train_alone(ctx: &CollabContext, participant: &mut Participant) -> Result<()> {
    match participant {
        Participant::Crs(crs) => crs.train(ctx.train, &HashMap::new()),
        Participant::Llm(llm) => {
            let samples = instruction_samples(ctx, &ctx.of_kind(ctx.train))?;
            llm.fine_tune(&samples).map(|_| ())
        }
    }
}

/// Predict the test instances of `ctx.kind` without assistance.
pub fn predict_alone(ctx: &CollabContext, participant: &Participant) -> Result<CollabOutcome> {
    let test = ctx.of_kind(ctx.test);
    match participant {
        Participant::Crs(crs) => crs_outcome(crs.as_ref(), &test, &HashMap::new()),
        Participant::Llm(llm) => {
            let samples = instruction_samples(ctx, &test)?;
            llm_outcome(llm.as_ref(), &samples)
        }
    }
}

/// No collaboration: train, then predict.
pub fn run_single(ctx: &CollabContext, participant: &mut Participant) -> Result<CollabOutcome> {
    train_alone(ctx, participant)?;
    predict_alone(ctx, participant)
}

fn crs_outcome(
    crs: &dyn CrsSystem,
    test: &[&TaskInstance],
    payloads: &HashMap<InstanceKey, AssistPayload>,
) -> Result<CollabOutcome> {
    let results: Vec<(InstanceKey, CrsOutput)> = test
        .par_iter()
        .map(|i| Ok((i.key(), crs.predict(i, payloads.get(&i.key()))?)))
        .collect::<Result<_>>()?;
    let mut out = CollabOutcome::default();
    for ((key, o), inst) in results.into_iter().zip(test) {
        if !o.parse_ok {
            out.parse_failures += 1;
        }
        out.inputs
            .insert(key.clone(), prompt_text(inst, payloads.get(&key)));
        out.predictions.insert(key, o.into());
    }
    Ok(out)
}

fn llm_outcome(llm: &dyn LLMBackend, samples: &[InstructionSample]) -> Result<CollabOutcome> {
    let preds: Vec<LLMPrediction> = samples
        .par_iter()
        .map(|s| predict_sample(llm, s))
        .collect::<Result<_>>()?;
    let mut out = CollabOutcome::default();
    for (s, p) in samples.iter().zip(preds) {
        if !p.parse_ok {
            out.parse_failures += 1;
        }
        out.inputs.insert(s.key(), s.input.clone());
        out.predictions.insert(s.key(), p.into());
    }
    Ok(out)
}

/// CRS input text of an instance as the assisted system sees it.
fn prompt_text(instance: &TaskInstance, payload: Option<&AssistPayload>) -> String {
    let Ok(seq) =
        crate::crs::prompt::serialize_context(instance, PromptVariant::for_instance(instance))
    else {
        return String::new();
    };
    match payload {
        Some(p) if instance.kind() != TaskKind::Recommendation => augment_prompt_with_llm(&seq, p)
            .map(|s| s.text)
            .unwrap_or(seq.text),
        _ => seq.text,
    }
}

/// Run one named variant for `ctx.kind`. The assister must already be
/// trained; the assisted system is trained here on assisted inputs.
pub fn run_collaboration(
    variant: VariantName,
    ctx: &CollabContext,
    assister: Option<&Participant>,
    assisted: Option<&mut Participant>,
) -> Result<CollabOutcome> {
    let (a_id, b_id, direction) = variant.route();
    let assister =
        assister.ok_or_else(|| Error::Config(format!("{variant}: no backend bound to {a_id}")))?;
    let assisted =
        assisted.ok_or_else(|| Error::Config(format!("{variant}: no backend bound to {b_id}")))?;
    let train = ctx.of_kind(ctx.train);
    let test = ctx.of_kind(ctx.test);
    match (direction, assister, assisted) {
        (CollabDirection::CrsAssistsLlm, Participant::Crs(crs), Participant::Llm(llm)) => {
            let crs: &dyn CrsSystem = crs.as_ref();
            let payload_of = |inst: &TaskInstance| -> Result<AssistPayload> {
                if ctx.gold_assist {
                    Ok(AssistPayload::gold(inst, AssistSource::Crs, |_| Vec::new()))
                } else {
                    Ok(AssistPayload::from_crs(&crs.predict(inst, None)?))
                }
            };
            let mut records = Vec::new();
            let mut augment =
                |split: Split, insts: &[&TaskInstance]| -> Result<Vec<InstructionSample>> {
                    let payloads: Vec<AssistPayload> = insts
                        .par_iter()
                        .map(|i| payload_of(i))
                        .collect::<Result<_>>()?;
                    let mut out = Vec::with_capacity(insts.len());
                    for (inst, p) in insts.iter().zip(payloads) {
                        let sample = build_instruction_sample(inst, ctx.category, ctx.templates)?;
                        out.push(augment_instruction_with_crs(&sample, &p)?);
                        records.push(PayloadRecord {
                            split,
                            key: inst.key(),
                            payload: p,
                        });
                    }
                    Ok(out)
                };
            let train_samples = augment(Split::Train, &train)?;
            let test_samples = augment(Split::Test, &test)?;
            llm.fine_tune(&train_samples)?;
            let mut out = llm_outcome(llm.as_ref(), &test_samples)?;
            out.assist_failures = records.iter().filter(|r| !r.payload.parse_ok).count();
            out.payloads = records;
            Ok(out)
        }
        (CollabDirection::LlmAssistsCrs, Participant::Llm(llm), Participant::Crs(crs)) => {
            let llm: &dyn LLMBackend = llm.as_ref();
            let mut records = Vec::new();
            for (split, insts) in [(Split::Train, &train), (Split::Test, &test)] {
                let target: &dyn CrsSystem = crs.as_ref();
                let payloads: Vec<AssistPayload> = insts
                    .par_iter()
                    .map(|inst| {
                        let embed = |p: Option<&str>| target.assist_embedding(p);
                        if ctx.gold_assist {
                            return Ok(AssistPayload::gold(inst, AssistSource::Llm, embed));
                        }
                        let sample = build_instruction_sample(inst, ctx.category, ctx.templates)?;
                        Ok(AssistPayload::from_llm(
                            &predict_sample(llm, &sample)?,
                            embed,
                        ))
                    })
                    .collect::<Result<_>>()?;
                records.extend(
                    insts
                        .iter()
                        .zip(payloads)
                        .map(|(inst, payload)| PayloadRecord {
                            split,
                            key: inst.key(),
                            payload,
                        }),
                );
            }
            let train_map: HashMap<InstanceKey, AssistPayload> = records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| (r.key.clone(), r.payload.clone()))
                .collect();
            let test_map: HashMap<InstanceKey, AssistPayload> = records
                .iter()
                .filter(|r| r.split == Split::Test)
                .map(|r| (r.key.clone(), r.payload.clone()))
                .collect();
            crs.train(ctx.train, &train_map)?;
            let mut out = crs_outcome(crs.as_ref(), &test, &test_map)?;
            out.assist_failures = records.iter().filter(|r| !r.payload.parse_ok).count();
            out.payloads = records;
            Ok(out)
        }
        (_, a, b) => Err(Error::Config(format!(
            "{variant} needs {} assisting {}, got {a:?} and {b:?}",
            if a_id.is_llm() { "an LLM" } else { "a CRS" },
            if b_id.is_llm() { "an LLM" } else { "a CRS" },
        ))),
    }
}

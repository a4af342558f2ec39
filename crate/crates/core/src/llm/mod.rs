//! Instruction data for language models, output parsing and the backend
//! contract.

mod backends;
mod external;
mod templates;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backends::{CopyAssistLlm, NoisyOracleLlm, OracleLlm, TinyLlm, TinyLlmConfig};
pub use external::{ExternalConfig, ExternalLlm};
pub use templates::{LanguageTemplates, TemplateSet};

use crate::corpus::{flatten_turns, Category, Role, SemanticFrame, DEFAULT_SEPARATOR};
use crate::crs::prompt::{parse_structured_output, render_frames, render_list};
use crate::error::{Error, Result};
use crate::tasks::{TaskInstance, TaskKind, CANDIDATE_LIMIT};

/// One instruction-tuning sample plus the routing metadata that stays out
/// of the instruction files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub kind: TaskKind,
    pub category: String,
    pub dialogue_id: String,
    pub cut_index: usize,
    #[serde(default)]
    pub sub_index: usize,
    /// Candidate labels and the products behind them (recommendation).
    #[serde(default)]
    pub candidates: Vec<(char, String)>,
    pub template_version: String,
    /// Set once a CRS-results section has been appended.
    #[serde(default)]
    pub crs_assisted: bool,
}

/// The three normative keys of an instruction file line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl InstructionSample {
    pub fn record(&self) -> InstructionRecord {
        InstructionRecord {
            instruction: self.instruction.clone(),
            input: self.input.clone(),
            output: self.output.clone(),
        }
    }

    pub fn key(&self) -> crate::tasks::InstanceKey {
        crate::tasks::InstanceKey {
            dialogue_id: self.dialogue_id.clone(),
            cut_index: self.cut_index,
            kind: self.kind,
            sub_index: self.sub_index,
        }
    }

    pub fn labels(&self) -> Vec<char> {
        self.candidates.iter().map(|(l, _)| *l).collect()
    }
}

/// Write `{instruction, input, output}` lines.
pub fn write_instruction_file(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        let line = serde_json::to_string(&s.record())?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instruction_file(path: &Path) -> Result<Vec<InstructionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn role_label(t: &LanguageTemplates, role: Role) -> &str {
    match role {
        Role::User => &t.user,
        Role::System => &t.system,
    }
}

fn render_candidate(t: &LanguageTemplates, label: &str, pairs: &[(&str, &str)]) -> String {
    let body = pairs
        .iter()
        .map(|(a, v)| {
            t.candidate_pair
                .replace("{attribute}", a)
                .replace("{value}", v)
        })
        .collect::<Vec<_>>()
        .join(&t.pair_separator);
    if body.is_empty() {
        label.to_string()
    } else {
        format!("{}{body}", t.candidate_prefix.replace("{label}", label))
    }
}

/// Build the instruction sample of a task instance.
pub fn build_instruction_sample(
    instance: &TaskInstance,
    category: &Category,
    templates: &TemplateSet,
) -> Result<InstructionSample> {
    let t = &templates.text;
    let kind = instance.kind();
    let mut sections = vec![format!(
        "{}{}",
        t.dialogue,
        flatten_turns(&instance.context, (&t.user, &t.system), DEFAULT_SEPARATOR)
    )];
    let mut candidates = Vec::new();
    let output = match kind {
        TaskKind::Understanding => {
            let current = instance.current.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no current turn", instance.key()))
            })?;
            sections.push(format!(
                "{}{}{}",
                t.current_input,
                role_label(t, current.role()),
                current.utterance.text
            ));
            render_frames(instance.gold_frames().unwrap_or_default())
        }
        TaskKind::Elicitation => render_list(instance.gold_attributes().unwrap_or_default()),
        TaskKind::Recommendation => {
            if instance.candidates.len() > CANDIDATE_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} candidates, at most {CANDIDATE_LIMIT} are allowed",
                    instance.key(),
                    instance.candidates.len()
                )));
            }
            let gold = instance.gold_product().unwrap_or_default();
            let label = instance.label_of(gold).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "gold product {gold:?} of {} is not a candidate",
                    instance.key()
                ))
            })?;
            let rendered: Vec<String> = instance
                .candidates
                .iter()
                .map(|c| {
                    render_candidate(
                        t,
                        &c.label.to_string(),
                        &c.product.attributes_in_schema_order(category),
                    )
                })
                .collect();
            sections.push(format!(
                "{}{}",
                t.candidates,
                rendered.join(DEFAULT_SEPARATOR)
            ));
            candidates = instance
                .candidates
                .iter()
                .map(|c| (c.label, c.product.product_id.clone()))
                .collect();
            label.to_string()
        }
        TaskKind::Generation => {
            sections.push(format!(
                "{}{}",
                t.acquired_needs,
                render_frames(&instance.acquired_needs())
            ));
            if !instance.guide_attributes.is_empty() {
                sections.push(format!(
                    "{}{}",
                    t.guide_attributes,
                    render_list(&instance.guide_attributes)
                ));
            }
            if !instance.guide_products.is_empty() {
                sections.push(format!(
                    "{}{}",
                    t.guide_products,
                    render_list(&instance.guide_products)
                ));
            }
            instance.gold_response().unwrap_or_default().to_string()
        }
    };
    Ok(InstructionSample {
        instruction: t.instruction(kind, &category.name),
        input: sections.join(&t.section_separator),
        output,
        kind,
        category: instance.category.clone(),
        dialogue_id: instance.dialogue_id.clone(),
        cut_index: instance.cut_index,
        sub_index: instance.sub_index,
        candidates,
        template_version: templates.tag(),
        crs_assisted: false,
    })
}

/// A parsed model output. Exactly the field matching `kind` is populated
/// when `parse_ok`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LLMPrediction {
    pub kind: TaskKind,
    #[serde(default)]
    pub frames: Vec<SemanticFrame>,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub letter: Option<char>,
    pub product_id: Option<String>,
    pub response: Option<String>,
    pub raw_text: String,
    pub parse_ok: bool,
}

const LETTER_CUES: &[&str] = &[
    "option",
    "candidate",
    "product",
    "item",
    "choice",
    "answer",
    "recommend",
];

fn standalone_letters(text: &str) -> Vec<(usize, char)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_uppercase() {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before_ok && after_ok {
            out.push((i, c));
        }
    }
    out
}

/// The pronoun "I": followed by a space and a lowercase word, or by an
/// apostrophe.
fn is_pronoun(chars: &[char], i: usize) -> bool {
    if chars[i] != 'I' {
        return false;
    }
    match (chars.get(i + 1), chars.get(i + 2)) {
        (Some('\''), _) | (Some('’'), _) => true,
        (Some(' '), Some(c)) => c.is_lowercase(),
        _ => false,
    }
}

/// Extract a candidate letter from free text.
///
/// In order: the whole trimmed text is a letter; a letter directly after a
/// cue word such as "option" or "recommend"; the first standalone capital
/// letter that is not the pronoun "I". The letter must be one of `labels`.
pub fn extract_letter(text: &str, labels: &[char]) -> Option<char> {
    let trimmed = text
        .trim()
        .trim_end_matches(['.', '!', ')'])
        .trim_start_matches('(');
    let mut it = trimmed.chars();
    if let (Some(c), None) = (it.next(), it.next()) {
        let c = c.to_ascii_uppercase();
        return labels.contains(&c).then_some(c);
    }
    let chars: Vec<char> = text.chars().collect();
    let letters = standalone_letters(text);
    let lower: String = text.to_lowercase();
    let lower_chars: Vec<char> = lower.chars().collect();
    for &(i, c) in &letters {
        let head: String = lower_chars[..i].iter().collect();
        let head = head.trim_end_matches([' ', ':', '(']);
        if LETTER_CUES.iter().any(|cue| head.ends_with(cue))
            && labels.contains(&c)
            && !is_pronoun(&chars, i)
        {
            return Some(c);
        }
    }
    letters
        .into_iter()
        .find(|&(i, c)| !is_pronoun(&chars, i) && labels.contains(&c))
        .map(|(_, c)| c)
}

/// Parse raw model text for a task. `candidates` maps labels to products
/// and is only consulted for recommendation.
pub fn parse_llm_output(raw: &str, kind: TaskKind, candidates: &[(char, String)]) -> LLMPrediction {
    let mut p = LLMPrediction {
        kind,
        frames: Vec::new(),
        attributes: Vec::new(),
        letter: None,
        product_id: None,
        response: None,
        raw_text: raw.to_string(),
        parse_ok: false,
    };
    match kind {
        TaskKind::Understanding | TaskKind::Elicitation => {
            let s = parse_structured_output(raw, kind);
            p.parse_ok = s.dropped.is_empty() && !(s.is_empty() && !raw.trim().is_empty());
            p.frames = s.frames;
            p.attributes = s.attributes;
        }
        TaskKind::Recommendation => {
            let labels: Vec<char> = candidates.iter().map(|(l, _)| *l).collect();
            if let Some(letter) = extract_letter(raw, &labels) {
                p.letter = Some(letter);
                p.product_id = candidates
                    .iter()
                    .find(|(l, _)| *l == letter)
                    .map(|(_, id)| id.clone());
                p.parse_ok = true;
            }
        }
        TaskKind::Generation => {
            let text = raw.trim();
            p.parse_ok = !text.is_empty();
            p.response = Some(text.to_string());
        }
    }
    p
}

/// Opaque result of fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterState {
    pub backend: String,
    pub samples: usize,
    /// Digest of the training records, in order.
    pub data_digest: String,
}

impl AdapterState {
    pub fn new(backend: &str, samples: &[InstructionSample]) -> Self {
        let mut bytes = Vec::new();
        for s in samples {
            bytes.extend(serde_json::to_vec(&s.record()).expect("records serialize"));
            bytes.push(b'\n');
        }
        AdapterState {
            backend: backend.to_string(),
            samples: samples.len(),
            data_digest: crate::util::sha256_hex(&bytes),
        }
    }
}

/// Fine-tune/complete contract shared by every LLM backend.
pub trait LLMBackend: Send + Sync {
    fn name(&self) -> &str;

    fn fine_tune(&mut self, samples: &[InstructionSample]) -> Result<AdapterState>;

    fn complete(&self, instruction: &str, input: &str) -> Result<String>;

    /// Complete a whole sample. Oracles override this to use the sample's
    /// identity; everything else only sees the text.
    fn complete_sample(&self, sample: &InstructionSample) -> Result<String> {
        self.complete(&sample.instruction, &sample.input)
    }

    /// Whether `complete` is a pure function of its arguments.
    fn deterministic(&self) -> bool {
        true
    }
}

/// Complete a sample and parse the result.
pub fn predict_sample(
    backend: &dyn LLMBackend,
    sample: &InstructionSample,
) -> Result<LLMPrediction> {
    let raw = backend.complete_sample(sample)?;
    Ok(parse_llm_output(&raw, sample.kind, &sample.candidates))
}

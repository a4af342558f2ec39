//! In-process LLM backends: exact and noisy oracles, a copy-assist oracle
//! and a small trainable model.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdapterState, InstructionSample, LLMBackend};
use crate::collab::CRS_RESULT_LABEL;
use crate::crs::backend::Seq2SeqBackend;
use crate::crs::prompt::parse_structured_output;
use crate::crs::tiny::FeatureDecoder;
use crate::error::{Error, Result};
use crate::tasks::{candidate_label, InstanceKey, TaskKind};
use crate::util::derive_seed;

#[derive(Debug, Clone)]
struct GoldEntry {
    instruction: String,
    output: String,
    kind: TaskKind,
    labels: Vec<char>,
}

/// Emits the gold output of any known `(instruction, input)`.
///
/// Lookup falls back to the longest known input that is a line prefix of
/// the query and whose instruction is a prefix of the query instruction, so
/// samples with an appended assist section still resolve.
#[derive(Debug, Clone, Default)]
pub struct OracleLlm {
    by_input: HashMap<String, Vec<GoldEntry>>,
    by_key: HashMap<InstanceKey, Vec<GoldEntry>>,
    len: usize,
}

impl OracleLlm {
    pub fn new<'a>(samples: impl IntoIterator<Item = &'a InstructionSample>) -> Self {
        let mut me = OracleLlm::default();
        for s in samples {
            me.insert(s);
        }
        me
    }

    pub fn insert(&mut self, s: &InstructionSample) {
        let entry = GoldEntry {
            instruction: s.instruction.clone(),
            output: s.output.clone(),
            kind: s.kind,
            labels: s.labels(),
        };
        let by_key = self.by_key.entry(s.key()).or_default();
        match by_key.iter_mut().find(|e| e.instruction == s.instruction) {
            Some(e) => *e = entry.clone(),
            None => by_key.push(entry.clone()),
        }
        let entries = self.by_input.entry(s.input.clone()).or_default();
        match entries.iter_mut().find(|e| e.instruction == s.instruction) {
            Some(e) => *e = entry,
            None => {
                entries.push(entry);
                self.len += 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// By instance identity first, so identical texts with different golds
    /// stay apart; by text otherwise.
    fn lookup_sample(&self, sample: &InstructionSample) -> Option<&GoldEntry> {
        self.by_key
            .get(&sample.key())
            .and_then(|entries| {
                entries
                    .iter()
                    .filter(|e| sample.instruction.starts_with(&e.instruction))
                    .max_by_key(|e| e.instruction.len())
            })
            .or_else(|| self.lookup(&sample.instruction, &sample.input))
    }

    fn lookup(&self, instruction: &str, input: &str) -> Option<&GoldEntry> {
        let mut probe = input;
        loop {
            if let Some(entries) = self.by_input.get(probe) {
                let best = entries
                    .iter()
                    .filter(|e| instruction.starts_with(&e.instruction))
                    .max_by_key(|e| e.instruction.len());
                if best.is_some() {
                    return best;
                }
            }
            probe = &probe[..probe.rfind('\n')?];
        }
    }
}

impl LLMBackend for OracleLlm {
    fn name(&self) -> &str {
        "oracle"
    }

    fn fine_tune(&mut self, samples: &[InstructionSample]) -> Result<AdapterState> {
        for s in samples {
            self.insert(s);
        }
        Ok(AdapterState::new(self.name(), samples))
    }

    fn complete(&self, instruction: &str, input: &str) -> Result<String> {
        self.lookup(instruction, input)
            .map(|e| e.output.clone())
            .ok_or(Error::UnknownSample)
    }

    fn complete_sample(&self, sample: &InstructionSample) -> Result<String> {
        self.lookup_sample(sample)
            .map(|e| e.output.clone())
            .ok_or(Error::UnknownSample)
    }
}

/// Gold with probability `p`, otherwise a well-formed wrong answer drawn
/// uniformly: another sample's output sharing nothing with the gold (the
/// same number of items when possible) or, for recommendation, another
/// candidate letter. Each `(instruction, input)` gets its own seeded draw.
#[derive(Debug, Clone)]
pub struct NoisyOracleLlm {
    oracle: OracleLlm,
    p: f64,
    seed: u64,
    pools: HashMap<TaskKind, Vec<String>>,
}

fn items(output: &str, kind: TaskKind) -> BTreeSet<String> {
    let s = parse_structured_output(output, kind);
    match kind {
        TaskKind::Understanding => s
            .frames
            .iter()
            .map(|f| format!("{}\u{1f}{}", f.attribute, f.value))
            .collect(),
        TaskKind::Elicitation => s.attributes.into_iter().collect(),
        _ => std::iter::once(output.trim().to_string()).collect(),
    }
}

impl NoisyOracleLlm {
    pub fn new<'a>(
        samples: impl IntoIterator<Item = &'a InstructionSample> + Clone,
        p: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {p} outside [0, 1]"
            )));
        }
        let mut pools: HashMap<TaskKind, BTreeSet<String>> = HashMap::new();
        for s in samples.clone() {
            if s.kind != TaskKind::Recommendation {
                pools.entry(s.kind).or_default().insert(s.output.clone());
            }
        }
        Ok(NoisyOracleLlm {
            oracle: OracleLlm::new(samples),
            p,
            seed,
            pools: pools
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.p
    }

    fn answer(&self, entry: &GoldEntry, seed_parts: &[&str]) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, seed_parts));
        if rng.gen_bool(self.p) {
            entry.output.clone()
        } else {
            self.wrong_answer(entry, &mut rng)
        }
    }

    fn wrong_answer(&self, entry: &GoldEntry, rng: &mut ChaCha8Rng) -> String {
        if entry.kind == TaskKind::Recommendation {
            let labels: Vec<char> = if entry.labels.is_empty() {
                (0..crate::tasks::CANDIDATE_LIMIT)
                    .map(candidate_label)
                    .collect()
            } else {
                entry.labels.clone()
            };
            let others: Vec<char> = labels
                .into_iter()
                .filter(|l| l.to_string() != entry.output.trim())
                .collect();
            return others[rng.gen_range(0..others.len())].to_string();
        }
        let gold = items(&entry.output, entry.kind);
        let pool = self
            .pools
            .get(&entry.kind)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let disjoint: Vec<&String> = pool
            .iter()
            .filter(|o| {
                let other = items(o, entry.kind);
                !other.is_empty() && other.is_disjoint(&gold)
            })
            .collect();
        let same_size: Vec<&String> = disjoint
            .iter()
            .copied()
            .filter(|o| items(o, entry.kind).len() == gold.len())
            .collect();
        let choice = if !same_size.is_empty() {
            same_size
        } else {
            disjoint
        };
        if choice.is_empty() {
            return String::new();
        }
        choice[rng.gen_range(0..choice.len())].clone()
    }
}

impl LLMBackend for NoisyOracleLlm {
    fn name(&self) -> &str {
        "noisy-oracle"
    }

    fn fine_tune(&mut self, samples: &[InstructionSample]) -> Result<AdapterState> {
        self.oracle.fine_tune(samples)?;
        Ok(AdapterState::new(self.name(), samples))
    }

    fn complete(&self, instruction: &str, input: &str) -> Result<String> {
        let entry = self
            .oracle
            .lookup(instruction, input)
            .ok_or(Error::UnknownSample)?;
        Ok(self.answer(entry, &["noisy", instruction, input]))
    }

    fn complete_sample(&self, sample: &InstructionSample) -> Result<String> {
        let entry = self
            .oracle
            .lookup_sample(sample)
            .ok_or(Error::UnknownSample)?;
        let key = sample.key().to_string();
        Ok(self.answer(entry, &["noisy", &key, &sample.instruction]))
    }
}

/// Returns the content of the CRS-results section verbatim (the first
/// letter of a ranking for recommendation); empty when there is none.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyAssistLlm;

impl LLMBackend for CopyAssistLlm {
    fn name(&self) -> &str {
        "copy-assist"
    }

    fn fine_tune(&mut self, samples: &[InstructionSample]) -> Result<AdapterState> {
        Ok(AdapterState::new(self.name(), samples))
    }

    fn complete(&self, _instruction: &str, input: &str) -> Result<String> {
        let Some(pos) = input.rfind(CRS_RESULT_LABEL) else {
            return Ok(String::new());
        };
        let section = input[pos + CRS_RESULT_LABEL.len()..]
            .lines()
            .next()
            .unwrap_or("")
            .trim();
        if section == crate::collab::NO_RESULT {
            return Ok(String::new());
        }
        Ok(section.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyLlmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TinyLlmConfig {
    fn default() -> Self {
        TinyLlmConfig {
            epochs: 8,
            lr: 0.3,
            seed: 5,
        }
    }
}

/// A small trainable model: the log-linear decoder of the tiny CRS backend
/// with one output head per instruction text.
#[derive(Debug, Clone, Default)]
pub struct TinyLlm {
    config: TinyLlmConfig,
    decoder: FeatureDecoder,
}

impl TinyLlm {
    pub fn new(config: TinyLlmConfig) -> Self {
        TinyLlm {
            config,
            decoder: FeatureDecoder::new(),
        }
    }
}

impl LLMBackend for TinyLlm {
    fn name(&self) -> &str {
        "tiny"
    }

    fn fine_tune(&mut self, samples: &[InstructionSample]) -> Result<AdapterState> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..samples.len())
            .filter(|&i| !samples[i].output.trim().is_empty())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let s = &samples[i];
                self.decoder
                    .train_step(&s.input, &s.instruction, &s.output, self.config.lr)?;
            }
        }
        Ok(AdapterState::new(self.name(), samples))
    }

    fn complete(&self, instruction: &str, input: &str) -> Result<String> {
        Ok(DecoderView(&self.decoder).generate(input, instruction))
    }
}

/// Adapts the bare decoder to the generation helpers of the CRS backend
/// trait.
struct DecoderView<'a>(&'a FeatureDecoder);

impl Seq2SeqBackend for DecoderView<'_> {
    fn kind(&self) -> &'static str {
        "tiny-llm"
    }

    fn context_dim(&self) -> usize {
        0
    }

    fn encode(&self, _text: &str) -> Vec<f64> {
        Vec::new()
    }

    fn backprop_encoding(&mut self, _text: &str, _grad: &[f64], _lr: f64) {}

    fn vocab_size(&self, task_prompt: &str) -> usize {
        self.0.vocab_size(task_prompt)
    }

    fn token_ids(&self, task_prompt: &str, text: &str) -> Vec<usize> {
        self.0.token_ids(task_prompt, text)
    }

    fn eos_id(&self, _task_prompt: &str) -> usize {
        self.0.eos_id()
    }

    fn id_to_token(&self, task_prompt: &str, id: usize) -> String {
        self.0.id_to_token(task_prompt, id)
    }

    fn next_token_log_probs(&self, input: &str, task_prompt: &str, prefix: &[usize]) -> Vec<f64> {
        self.0.next_token_log_probs(input, task_prompt, prefix)
    }

    fn train_step(
        &mut self,
        _input: &str,
        _task_prompt: &str,
        _target: &str,
        _lr: f64,
    ) -> Result<f64> {
        Err(Error::Unsupported("read-only decoder view".into()))
    }

    fn to_blob(&self) -> Result<String> {
        Ok(serde_json::to_string(self.0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(input: &str, output: &str, kind: TaskKind) -> InstructionSample {
        InstructionSample {
            instruction: "Do it.".into(),
            input: input.into(),
            output: output.into(),
            kind,
            category: "c".into(),
            dialogue_id: "d".into(),
            cut_index: 0,
            sub_index: 0,
            candidates: Vec::new(),
            template_version: "v1/en".into(),
            crs_assisted: false,
        }
    }

    #[test]
    fn oracle_resolves_exact_and_extended_queries() {
        let o = OracleLlm::new(&[sample("Dialogue: x", "color: red", TaskKind::Understanding)]);
        assert_eq!(o.complete("Do it.", "Dialogue: x").unwrap(), "color: red");
        assert_eq!(
            o.complete("Do it. Also this.", "Dialogue: x\nextra: y")
                .unwrap(),
            "color: red"
        );
        assert!(matches!(
            o.complete("Do it.", "Dialogue: z"),
            Err(Error::UnknownSample)
        ));
        assert!(matches!(
            o.complete("Other.", "Dialogue: x"),
            Err(Error::UnknownSample)
        ));
    }

    #[test]
    fn noisy_extremes() {
        let samples: Vec<InstructionSample> = (0..50)
            .map(|i| {
                sample(
                    &format!("in {i}"),
                    &format!("a{}: v{}", i % 7, i % 5),
                    TaskKind::Understanding,
                )
            })
            .collect();
        let exact = NoisyOracleLlm::new(&samples, 1.0, 3).unwrap();
        let never = NoisyOracleLlm::new(&samples, 0.0, 3).unwrap();
        for s in &samples {
            assert_eq!(exact.complete(&s.instruction, &s.input).unwrap(), s.output);
            let wrong = never.complete(&s.instruction, &s.input).unwrap();
            assert!(items(&wrong, s.kind).is_disjoint(&items(&s.output, s.kind)));
            assert_eq!(wrong, never.complete(&s.instruction, &s.input).unwrap());
        }
        assert!(NoisyOracleLlm::new(&samples, 1.5, 3).is_err());
    }

    #[test]
    fn copy_assist_reads_the_section() {
        let c = CopyAssistLlm;
        let input = format!("Dialogue: x\n{}color: red", CRS_RESULT_LABEL);
        assert_eq!(c.complete("i", &input).unwrap(), "color: red");
        assert_eq!(c.complete("i", "Dialogue: x").unwrap(), "");
    }

    #[test]
    fn tiny_llm_learns_a_mapping() {
        let samples: Vec<InstructionSample> = ["red", "blue", "green", "black"]
            .iter()
            .map(|v| {
                sample(
                    &format!("Dialogue: hi\nCurrent input: User: I want {v}"),
                    &format!("color: {v}"),
                    TaskKind::Understanding,
                )
            })
            .collect();
        let mut t = TinyLlm::new(TinyLlmConfig::default());
        t.fine_tune(&samples).unwrap();
        for s in &samples {
            assert_eq!(t.complete(&s.instruction, &s.input).unwrap(), s.output);
        }
    }
}

//! A small trainable backend: a mean-of-embeddings encoder and a
//! feature-based autoregressive decoder.
//!
//! The decoder is log-linear. At each step the next-token distribution is a
//! softmax over sparse indicator features of the previous two tokens, the
//! tokens of the focus segment (the last utterance and anything appended
//! after it) and the bag of context tokens, with conjunctions that let it
//! copy values from the input and stop once they have been emitted. Each
//! task prompt gets its own output vocabulary and weights.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{log_softmax, softmax, tokenize, Seq2SeqBackend};
use crate::error::{Error, Result};
use crate::util::derive_seed;

const EOS: &str = "</s>";
const UNK: &str = "<unk>";
const BOS: &str = "<s>";
const EOS_ID: usize = 0;
const UNK_ID: usize = 1;
const ADAGRAD_EPS: f32 = 1e-8;

/// Tokens of the last line after its last role marker, and every token of
/// the input.
#[derive(Debug, Clone)]
pub struct InputView {
    focus: Vec<String>,
    context: Vec<String>,
}

impl InputView {
    pub fn new(input: &str) -> Self {
        let last_line = input.rsplit('\n').next().unwrap_or(input);
        let line_tokens = tokenize(last_line);
        let start = line_tokens
            .iter()
            .rposition(|t| t == "[user]" || t == "[system]")
            .map_or(0, |i| i + 1);
        let mut seen = HashSet::new();
        let focus = line_tokens[start..]
            .iter()
            .filter(|t| seen.insert(t.as_str()))
            .cloned()
            .collect();
        let mut seen = HashSet::new();
        let context = tokenize(input)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect();
        InputView { focus, context }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct DecoderHead {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    weights: HashMap<String, Vec<f32>>,
    #[serde(skip)]
    accum: HashMap<String, Vec<f32>>,
}

impl DecoderHead {
    fn new() -> Self {
        let mut h = DecoderHead::default();
        h.intern(EOS);
        h.intern(UNK);
        h
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    fn intern(&mut self, tok: &str) -> usize {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        self.vocab.push(tok.to_string());
        self.index.insert(tok.to_string(), self.vocab.len() - 1);
        self.vocab.len() - 1
    }

    fn lookup(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    fn scores(&self, features: &[String]) -> Vec<f64> {
        let mut s = vec![0.0f64; self.vocab.len()];
        for f in features {
            if let Some(row) = self.weights.get(f) {
                for (acc, w) in s.iter_mut().zip(row) {
                    *acc += *w as f64;
                }
            }
        }
        s
    }

    fn update(&mut self, features: &[String], grad: &[f64], lr: f32) {
        let v = self.vocab.len();
        for f in features {
            let row = self.weights.entry(f.clone()).or_default();
            let acc = self.accum.entry(f.clone()).or_default();
            if row.len() < v {
                row.resize(v, 0.0);
            }
            if acc.len() < v {
                acc.resize(v, 0.0);
            }
            for y in 0..v {
                let g = grad[y] as f32;
                if g == 0.0 {
                    continue;
                }
                acc[y] += g * g;
                row[y] -= lr * g / (acc[y].sqrt() + ADAGRAD_EPS);
            }
        }
    }
}

/// Log-linear next-token model with one head per task prompt.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeatureDecoder {
    heads: BTreeMap<String, DecoderHead>,
}

impl FeatureDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn head(&self, prompt: &str) -> Option<&DecoderHead> {
        self.heads.get(prompt)
    }

    fn rebuild(&mut self) {
        for h in self.heads.values_mut() {
            h.rebuild_index();
        }
    }

    fn features(view: &InputView, prefix: &[&str]) -> Vec<String> {
        let y1 = prefix.last().copied().unwrap_or(BOS);
        let y2 = if prefix.len() >= 2 {
            prefix[prefix.len() - 2]
        } else {
            BOS
        };
        let emitted: HashSet<&str> = prefix.iter().copied().collect();
        let mut out = Vec::with_capacity(8 + 6 * view.focus.len() + 3 * view.context.len());
        out.push("b".to_string());
        out.push(format!("p1|{y1}"));
        out.push(format!("p2|{y2}|{y1}"));
        out.push(format!("len|{}", prefix.len().min(12)));
        for f in &view.focus {
            out.push(format!("f|{f}"));
            out.push(format!("f1|{f}|{y1}"));
            out.push(format!("f2|{f}|{y2}"));
            if !emitted.contains(f.as_str()) {
                out.push(format!("fu|{f}"));
                out.push(format!("fu1|{f}|{y1}"));
            }
        }
        for c in &view.context {
            out.push(format!("c|{c}"));
            out.push(format!("c1|{c}|{y1}"));
            if !emitted.contains(c.as_str()) {
                out.push(format!("cu|{c}"));
            }
        }
        out
    }

    pub fn vocab_size(&self, prompt: &str) -> usize {
        self.head(prompt).map_or(2, |h| h.vocab.len())
    }

    pub fn token_ids(&self, prompt: &str, text: &str) -> Vec<usize> {
        let toks = tokenize(text);
        match self.head(prompt) {
            Some(h) => toks.iter().map(|t| h.lookup(t)).collect(),
            None => vec![UNK_ID; toks.len()],
        }
    }

    pub fn id_to_token(&self, prompt: &str, id: usize) -> String {
        self.head(prompt)
            .and_then(|h| h.vocab.get(id).cloned())
            .unwrap_or_else(|| UNK.to_string())
    }

    pub fn next_token_log_probs(&self, input: &str, prompt: &str, prefix: &[usize]) -> Vec<f64> {
        let view = InputView::new(input);
        self.log_probs_with_view(&view, prompt, prefix)
    }

    fn log_probs_with_view(&self, view: &InputView, prompt: &str, prefix: &[usize]) -> Vec<f64> {
        let Some(h) = self.head(prompt) else {
            // Untrained prompt: certain end of sequence.
            return vec![0.0, f64::NEG_INFINITY];
        };
        let toks: Vec<&str> = prefix
            .iter()
            .map(|&i| h.vocab.get(i).map_or(UNK, String::as_str))
            .collect();
        let feats = Self::features(view, &toks);
        log_softmax(&h.scores(&feats))
    }

    /// Teacher-forced AdaGrad step; returns the mean loss before updating.
    pub fn train_step(&mut self, input: &str, prompt: &str, target: &str, lr: f64) -> Result<f64> {
        let toks = tokenize(target);
        if toks.is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let head = self
            .heads
            .entry(prompt.to_string())
            .or_insert_with(DecoderHead::new);
        if head.index.is_empty() {
            head.rebuild_index();
        }
        let mut ids: Vec<usize> = toks.iter().map(|t| head.intern(t)).collect();
        ids.push(EOS_ID);
        let view = InputView::new(input);
        let mut total = 0.0;
        let mut prefix: Vec<&str> = Vec::with_capacity(ids.len());
        for (l, &gold) in ids.iter().enumerate() {
            let feats = Self::features(&view, &prefix);
            let probs = softmax(&head.scores(&feats));
            total -= probs[gold].max(1e-300).ln();
            let mut grad = probs;
            grad[gold] -= 1.0;
            head.update(&feats, &grad, lr as f32);
            if l < toks.len() {
                prefix.push(toks[l].as_str());
            }
        }
        Ok(total / ids.len() as f64)
    }

    pub fn eos_id(&self) -> usize {
        EOS_ID
    }
}

/// Mean of token embeddings; unseen tokens get seed-derived vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagEncoder {
    dim: usize,
    seed: u64,
    init_scale: f64,
    embeddings: HashMap<String, Vec<f64>>,
    #[serde(skip)]
    accum: HashMap<String, Vec<f64>>,
}

impl BagEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        BagEncoder {
            dim,
            seed,
            init_scale: 1.0 / (dim as f64).sqrt(),
            embeddings: HashMap::new(),
            accum: HashMap::new(),
        }
    }

    fn init_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["token", token]));
        (0..self.dim)
            .map(|_| rng.gen_range(-1.0..1.0) * self.init_scale)
            .collect()
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        self.embeddings
            .get(token)
            .cloned()
            .unwrap_or_else(|| self.init_vector(token))
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let toks = tokenize(text);
        let mut out = vec![0.0; self.dim];
        if toks.is_empty() {
            return out;
        }
        for t in &toks {
            for (o, v) in out.iter_mut().zip(self.vector(t)) {
                *o += v;
            }
        }
        let n = toks.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn backprop(&mut self, text: &str, grad: &[f64], lr: f64) {
        let toks = tokenize(text);
        if toks.is_empty() {
            return;
        }
        let n = toks.len() as f64;
        let mut counts: HashMap<&str, f64> = HashMap::new();
        for t in &toks {
            *counts.entry(t.as_str()).or_default() += 1.0;
        }
        for (tok, c) in counts {
            let init = if self.embeddings.contains_key(tok) {
                None
            } else {
                Some(self.init_vector(tok))
            };
            let emb = self
                .embeddings
                .entry(tok.to_string())
                .or_insert_with(|| init.unwrap());
            let acc = self
                .accum
                .entry(tok.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for k in 0..emb.len() {
                let g = grad[k] * c / n;
                acc[k] += g * g;
                emb[k] -= lr * g / (acc[k].sqrt() + 1e-8);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig { dim: 32, seed: 17 }
    }
}

/// The small CPU backend used for toy-scale training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinySeq2Seq {
    config: TinyConfig,
    encoder: BagEncoder,
    decoder: FeatureDecoder,
}

impl TinySeq2Seq {
    pub fn new(config: TinyConfig) -> Self {
        TinySeq2Seq {
            config,
            encoder: BagEncoder::new(config.dim, config.seed),
            decoder: FeatureDecoder::new(),
        }
    }

    pub fn from_blob(blob: &str) -> Result<Self> {
        let mut me: TinySeq2Seq = serde_json::from_str(blob)?;
        me.decoder.rebuild();
        Ok(me)
    }
}

impl Seq2SeqBackend for TinySeq2Seq {
    fn kind(&self) -> &'static str {
        "tiny"
    }

    fn context_dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.encoder.encode(text)
    }

    fn backprop_encoding(&mut self, text: &str, grad: &[f64], lr: f64) {
        self.encoder.backprop(text, grad, lr);
    }

    fn vocab_size(&self, task_prompt: &str) -> usize {
        self.decoder.vocab_size(task_prompt)
    }

    fn token_ids(&self, task_prompt: &str, text: &str) -> Vec<usize> {
        self.decoder.token_ids(task_prompt, text)
    }

    fn eos_id(&self, _task_prompt: &str) -> usize {
        self.decoder.eos_id()
    }

    fn id_to_token(&self, task_prompt: &str, id: usize) -> String {
        self.decoder.id_to_token(task_prompt, id)
    }

    fn next_token_log_probs(&self, input: &str, task_prompt: &str, prefix: &[usize]) -> Vec<f64> {
        self.decoder
            .next_token_log_probs(input, task_prompt, prefix)
    }

    fn train_step(&mut self, input: &str, task_prompt: &str, target: &str, lr: f64) -> Result<f64> {
        self.decoder.train_step(input, task_prompt, target, lr)
    }

    fn to_blob(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

//! Encoder/decoder contract behind the unified CRS.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{PromptSequence, SpecialToken};
use crate::error::{Error, Result};

const PUNCTUATION: [char; 4] = [':', ';', ',', '?'];
const EXTRA_SPECIALS: [&str; 1] = ["[SEP]"];

/// Whitespace tokenization with special tokens and `: ; , ?` split off.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 16);
    let specials: Vec<&str> = SpecialToken::ALL
        .iter()
        .map(|t| t.as_str())
        .chain(EXTRA_SPECIALS)
        .collect();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for s in &specials {
            if let Some(after) = rest.strip_prefix(s) {
                spaced.push(' ');
                spaced.push_str(s);
                spaced.push(' ');
                rest = after;
                continue 'outer;
            }
        }
        let c = rest.chars().next().unwrap();
        if PUNCTUATION.contains(&c) || c == '：' || c == '；' {
            let c = match c {
                '：' => ':',
                '；' => ';',
                c => c,
            };
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Inverse of [`tokenize`] up to whitespace: no space before `: ; ,`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let glue = matches!(t, ":" | ";" | ",");
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_len: 40,
        }
    }
}

/// Encoder/decoder used by the unified CRS.
///
/// The decoder is exposed one step at a time: `next_token_log_probs` gives
/// log-probabilities over the backend vocabulary for the token following
/// `prefix`. Generation and the teacher-forced loss are built on top of it.
pub trait Seq2SeqBackend: Send + Sync {
    /// Name recorded in checkpoints.
    fn kind(&self) -> &'static str;

    fn context_dim(&self) -> usize;

    /// Fixed-size encoding of a sequence.
    fn encode(&self, text: &str) -> Vec<f64>;

    /// Apply the gradient of a loss with respect to `encode(text)`.
    fn backprop_encoding(&mut self, text: &str, grad: &[f64], lr: f64);

    fn vocab_size(&self, task_prompt: &str) -> usize;

    /// Target token ids for `text`, without the end marker.
    fn token_ids(&self, task_prompt: &str, text: &str) -> Vec<usize>;

    fn eos_id(&self, task_prompt: &str) -> usize;

    fn id_to_token(&self, task_prompt: &str, id: usize) -> String;

    fn next_token_log_probs(&self, input: &str, task_prompt: &str, prefix: &[usize]) -> Vec<f64>;

    /// One teacher-forced update on `(input, target)`; returns the mean
    /// per-token loss before the update.
    fn train_step(&mut self, input: &str, task_prompt: &str, target: &str, lr: f64) -> Result<f64>;

    /// Whether `encode`/`generate` may be called from several threads.
    fn concurrent_safe(&self) -> bool {
        true
    }

    fn to_blob(&self) -> Result<String>;

    /// Detokenized output for a token id sequence.
    fn render(&self, task_prompt: &str, ids: &[usize]) -> String {
        let toks: Vec<String> = ids
            .iter()
            .map(|&i| self.id_to_token(task_prompt, i))
            .collect();
        detokenize(&toks)
    }

    fn generate(&self, input: &str, task_prompt: &str) -> String {
        self.generate_with(input, task_prompt, &DecodeConfig::default())
    }

    fn generate_with(&self, input: &str, task_prompt: &str, config: &DecodeConfig) -> String {
        let eos = self.eos_id(task_prompt);
        let mut prefix = Vec::new();
        let mut rng = match config.strategy {
            DecodeStrategy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeStrategy::Greedy => None,
        };
        while prefix.len() < config.max_len {
            let lp = self.next_token_log_probs(input, task_prompt, &prefix);
            if lp.is_empty() {
                break;
            }
            let next = match (config.strategy, rng.as_mut()) {
                (DecodeStrategy::Sample { temperature, .. }, Some(rng)) => {
                    sample_index(&lp, temperature.max(1e-6), rng)
                }
                _ => argmax(&lp),
            };
            if next == eos {
                break;
            }
            prefix.push(next);
        }
        self.render(task_prompt, &prefix)
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(log_probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    let probs = softmax(&scaled);
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax computed as `x - logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mean per-token negative log-likelihood of `target` (plus the end
/// marker) under teacher forcing.
pub fn seq2seq_loss(
    backend: &dyn Seq2SeqBackend,
    input: &PromptSequence,
    target: &str,
) -> Result<f64> {
    let prompt = input.task_prompt.as_str();
    let mut ids = backend.token_ids(prompt, target);
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty target sequence".into()));
    }
    ids.push(backend.eos_id(prompt));
    let mut total = 0.0;
    for l in 0..ids.len() {
        let lp = backend.next_token_log_probs(&input.text, prompt, &ids[..l]);
        total -= lp[ids[l]];
    }
    Ok(total / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_specials_and_punctuation() {
        assert_eq!(
            tokenize("[user] t1 [understand] color: red;size: big"),
            vec![
                "[user]",
                "t1",
                "[understand]",
                "color",
                ":",
                "red",
                ";",
                "size",
                ":",
                "big"
            ]
        );
        assert_eq!(tokenize("a[SEP]b"), vec!["a", "[SEP]", "b"]);
        assert_eq!(tokenize("品牌：金利来"), vec!["品牌", ":", "金利来"]);
    }

    #[test]
    fn detokenize_glues_separators() {
        let toks = tokenize("color: red;size: big");
        assert_eq!(detokenize(&toks), "color: red; size: big");
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip(lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

//! Test-double backends with known behaviour.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::backend::{tokenize, DecodeConfig, Seq2SeqBackend};
use super::prompt::SpecialToken;
use crate::error::{Error, Result};

/// Echoes a stored target for every known `(task prompt, input)` pair and
/// encodes known recommendation inputs as the one-hot vector of their gold
/// product. Inputs carrying an appended `[LLM]` segment fall back to the
/// text before it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GoldEchoBackend {
    targets: HashMap<String, HashMap<String, String>>,
    recommendations: HashMap<String, usize>,
    products: Vec<String>,
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

const ECHO_EOS: &str = "</s>";

fn strip_assist(input: &str) -> Option<&str> {
    let marker = format!(" {}", SpecialToken::Llm.as_str());
    input.rfind(&marker).map(|i| &input[..i])
}

impl GoldEchoBackend {
    /// `products` fixes the one-hot dimension used by `encode`.
    pub fn new(products: Vec<String>) -> Self {
        let mut me = GoldEchoBackend {
            products,
            ..Default::default()
        };
        me.intern(ECHO_EOS);
        me
    }

    fn intern(&mut self, tok: &str) -> usize {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        self.vocab.push(tok.to_string());
        self.index.insert(tok.to_string(), self.vocab.len() - 1);
        self.vocab.len() - 1
    }

    pub fn insert_target(&mut self, task_prompt: &str, input: &str, target: &str) {
        for t in tokenize(target) {
            self.intern(&t);
        }
        self.targets
            .entry(task_prompt.to_string())
            .or_default()
            .insert(input.to_string(), target.to_string());
    }

    pub fn insert_recommendation(&mut self, input: &str, product_id: &str) -> Result<()> {
        let i = self
            .products
            .iter()
            .position(|p| p == product_id)
            .ok_or_else(|| Error::UnknownProduct(product_id.to_string()))?;
        self.recommendations.insert(input.to_string(), i);
        Ok(())
    }

    /// Rebuild the token index after deserialization.
    pub fn reindexed(mut self) -> Self {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    fn target(&self, task_prompt: &str, input: &str) -> Option<&str> {
        let table = self.targets.get(task_prompt)?;
        table
            .get(input)
            .or_else(|| strip_assist(input).and_then(|s| table.get(s)))
            .map(String::as_str)
    }

    fn recommendation(&self, input: &str) -> Option<usize> {
        self.recommendations
            .get(input)
            .or_else(|| strip_assist(input).and_then(|s| self.recommendations.get(s)))
            .copied()
    }
}

impl Seq2SeqBackend for GoldEchoBackend {
    fn kind(&self) -> &'static str {
        "gold-echo"
    }

    fn context_dim(&self) -> usize {
        self.products.len()
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.products.len()];
        if let Some(i) = self.recommendation(text) {
            v[i] = 1.0;
        }
        v
    }

    fn backprop_encoding(&mut self, _text: &str, _grad: &[f64], _lr: f64) {}

    fn vocab_size(&self, _task_prompt: &str) -> usize {
        self.vocab.len()
    }

    fn token_ids(&self, _task_prompt: &str, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect()
    }

    fn eos_id(&self, _task_prompt: &str) -> usize {
        0
    }

    fn id_to_token(&self, _task_prompt: &str, id: usize) -> String {
        self.vocab.get(id).cloned().unwrap_or_default()
    }

    fn next_token_log_probs(&self, input: &str, task_prompt: &str, prefix: &[usize]) -> Vec<f64> {
        let v = self.vocab.len();
        let Some(target) = self.target(task_prompt, input) else {
            return vec![-(v as f64).ln(); v];
        };
        let ids = self.token_ids(task_prompt, target);
        let next = ids.get(prefix.len()).copied().unwrap_or(0);
        let mut lp = vec![f64::NEG_INFINITY; v];
        lp[next] = 0.0;
        lp
    }

    fn train_step(
        &mut self,
        input: &str,
        task_prompt: &str,
        target: &str,
        _lr: f64,
    ) -> Result<f64> {
        if tokenize(target).is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let known = self.target(task_prompt, input) == Some(target);
        Ok(if known {
            0.0
        } else {
            (self.vocab.len() as f64).ln()
        })
    }

    fn to_blob(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// The stored target verbatim, bypassing detokenization.
    fn generate_with(&self, input: &str, task_prompt: &str, _config: &DecodeConfig) -> String {
        self.target(task_prompt, input)
            .map(str::to_string)
            .unwrap_or_default()
    }
}

/// Uniform next-token distribution over a fixed vocabulary of `size`
/// tokens `t0..t{size-1}`, `t0` being the end marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformBackend {
    pub size: usize,
    pub dim: usize,
}

impl Seq2SeqBackend for UniformBackend {
    fn kind(&self) -> &'static str {
        "uniform"
    }

    fn context_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _text: &str) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn backprop_encoding(&mut self, _text: &str, _grad: &[f64], _lr: f64) {}

    fn vocab_size(&self, _task_prompt: &str) -> usize {
        self.size
    }

    fn token_ids(&self, _task_prompt: &str, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| {
                t.strip_prefix('t')
                    .and_then(|n| n.parse().ok())
                    .unwrap_or(0)
                    % self.size
            })
            .collect()
    }

    fn eos_id(&self, _task_prompt: &str) -> usize {
        0
    }

    fn id_to_token(&self, _task_prompt: &str, id: usize) -> String {
        format!("t{id}")
    }

    fn next_token_log_probs(
        &self,
        _input: &str,
        _task_prompt: &str,
        _prefix: &[usize],
    ) -> Vec<f64> {
        vec![-(self.size as f64).ln(); self.size]
    }

    fn train_step(
        &mut self,
        _input: &str,
        _task_prompt: &str,
        _target: &str,
        _lr: f64,
    ) -> Result<f64> {
        Ok((self.size as f64).ln())
    }

    fn to_blob(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crs::backend::seq2seq_loss;
    use crate::crs::prompt::{PromptSequence, PromptVariant};

    fn seq(text: &str, prompt: &str) -> PromptSequence {
        PromptSequence {
            variant: PromptVariant::UserUnderstanding,
            text: text.into(),
            task_prompt: prompt.into(),
            assist: None,
        }
    }

    #[test]
    fn echo_assigns_certainty_to_gold_tokens() {
        let mut b = GoldEchoBackend::new(vec![]);
        b.insert_target("Z", "[user] x", "color: red;size: big");
        assert_eq!(b.generate("[user] x", "Z"), "color: red;size: big");
        assert_eq!(
            b.generate("[user] x [LLM] color: red", "Z"),
            "color: red;size: big"
        );
        assert_eq!(
            seq2seq_loss(&b, &seq("[user] x", "Z"), "color: red;size: big").unwrap(),
            0.0
        );
        assert_eq!(b.generate("[user] y", "Z"), "");
    }

    #[test]
    fn echo_encodes_gold_as_one_hot() {
        let mut b = GoldEchoBackend::new(vec!["p0".into(), "p1".into()]);
        b.insert_recommendation("[user] r", "p1").unwrap();
        assert_eq!(b.encode("[user] r"), vec![0.0, 1.0]);
        assert_eq!(b.encode("[user] q"), vec![0.0, 0.0]);
        assert!(b.insert_recommendation("[user] r", "zz").is_err());
    }

    #[test]
    fn uniform_loss_is_log_vocab() {
        for v in [2usize, 7, 50] {
            let b = UniformBackend { size: v, dim: 1 };
            let l = seq2seq_loss(&b, &seq("x", "Z"), "t1 t2 t1").unwrap();
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
    }
}

//! The unified CRS: a backend, the recommendation head and item embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::{DecodeConfig, Seq2SeqBackend};
use super::head::{ItemEmbeddingTable, RecommendationHead, RecommendationScores};
use super::oracle::GoldEchoBackend;
use super::prompt::{
    parse_structured_output, render_frames, render_list, serialize_context, special_token_list,
    PromptSequence, PromptVariant,
};
use super::tiny::TinySeq2Seq;
use crate::corpus::{Catalog, SemanticFrame};
use crate::error::{Error, Result};
use crate::tasks::{TaskInstance, TaskKind};

/// Generation target of an instance; `None` for recommendation.
pub fn seq_target(instance: &TaskInstance) -> Option<String> {
    match instance.kind() {
        TaskKind::Understanding => instance.gold_frames().map(render_frames),
        TaskKind::Elicitation => instance.gold_attributes().map(render_list),
        TaskKind::Generation => instance.gold_response().map(str::to_string),
        TaskKind::Recommendation => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CrsPrediction {
    Frames(Vec<SemanticFrame>),
    Attributes(Vec<String>),
    Scores(RecommendationScores),
    Response(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrsOutput {
    pub prediction: CrsPrediction,
    /// Generated text for the generative tasks.
    pub raw_text: Option<String>,
    /// False when generated text could not be parsed cleanly.
    pub parse_ok: bool,
    pub dropped: Vec<String>,
}

impl CrsOutput {
    pub fn kind(&self) -> TaskKind {
        match self.prediction {
            CrsPrediction::Frames(_) => TaskKind::Understanding,
            CrsPrediction::Attributes(_) => TaskKind::Elicitation,
            CrsPrediction::Scores(_) => TaskKind::Recommendation,
            CrsPrediction::Response(_) => TaskKind::Generation,
        }
    }
}

/// Sizes and seeds for a fresh tiny CRS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrsSettings {
    pub context_dim: usize,
    pub item_dim: usize,
    pub seed: u64,
    /// Initialize item embeddings from product attributes rather than at
    /// random.
    pub attribute_init: bool,
}

impl Default for CrsSettings {
    fn default() -> Self {
        CrsSettings {
            context_dim: 32,
            item_dim: 32,
            seed: 17,
            attribute_init: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    special_tokens: Vec<String>,
    backend_kind: String,
    backend_blob: String,
    head: RecommendationHead,
    embeddings: ItemEmbeddingTable,
}

pub struct UnifiedCrs {
    pub backend: Box<dyn Seq2SeqBackend>,
    pub head: RecommendationHead,
    pub embeddings: ItemEmbeddingTable,
    pub decode: DecodeConfig,
}

impl std::fmt::Debug for UnifiedCrs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnifiedCrs")
            .field("backend", &self.backend.kind())
            .field("items", &self.embeddings.len())
            .finish()
    }
}

impl UnifiedCrs {
    pub fn new(
        backend: Box<dyn Seq2SeqBackend>,
        head: RecommendationHead,
        embeddings: ItemEmbeddingTable,
    ) -> Result<Self> {
        if head.context_dim() != backend.context_dim() {
            return Err(Error::DimensionMismatch {
                expected: head.context_dim(),
                actual: backend.context_dim(),
            });
        }
        if head.item_dim() != embeddings.dim() {
            return Err(Error::DimensionMismatch {
                expected: head.item_dim(),
                actual: embeddings.dim(),
            });
        }
        Ok(UnifiedCrs {
            backend,
            head,
            embeddings,
            decode: DecodeConfig::default(),
        })
    }

    /// An untrained CRS on the tiny backend covering `catalogs`.
    pub fn tiny<'a>(
        catalogs: impl IntoIterator<Item = &'a Catalog>,
        settings: CrsSettings,
    ) -> Self {
        let backend = TinySeq2Seq::new(super::tiny::TinyConfig {
            dim: settings.context_dim,
            seed: settings.seed,
        });
        let embeddings = if settings.attribute_init {
            ItemEmbeddingTable::from_attributes(catalogs, settings.item_dim, settings.seed)
        } else {
            ItemEmbeddingTable::random(catalogs, settings.item_dim, settings.seed)
        };
        let head = RecommendationHead::new(settings.item_dim, settings.context_dim, settings.seed);
        UnifiedCrs::new(Box::new(backend), head, embeddings)
            .expect("dimensions agree by construction")
    }

    /// A CRS whose predictions equal the gold of every instance given:
    /// generation echoes the gold text, and recommendation inputs encode to
    /// the one-hot vector of their gold product, matched by one-hot item
    /// embeddings through an identity head.
    pub fn gold_echo(instances: &[TaskInstance], product_ids: Vec<String>) -> Result<Self> {
        let n = product_ids.len();
        let mut backend = GoldEchoBackend::new(product_ids.clone());
        for inst in instances {
            let seq = serialize_context(inst, PromptVariant::for_instance(inst))?;
            match (seq_target(inst), inst.gold_product()) {
                (Some(target), _) => backend.insert_target(&seq.task_prompt, &seq.text, &target),
                (None, Some(gold)) => backend.insert_recommendation(&seq.text, gold)?,
                (None, None) => {}
            }
        }
        let vectors = product_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                (id.clone(), v)
            })
            .collect();
        let embeddings = ItemEmbeddingTable::new(n, vectors)?;
        let identity = (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect();
        let head = RecommendationHead::from_parts(n, n, identity, vec![0.0; n * n], vec![0.0; n])?;
        UnifiedCrs::new(Box::new(backend), head, embeddings)
    }

    pub fn prompt_for(&self, instance: &TaskInstance) -> Result<PromptSequence> {
        serialize_context(instance, PromptVariant::for_instance(instance))
    }

    pub fn score_candidates(
        &self,
        seq: &PromptSequence,
        candidates: &[String],
        assist: Option<&[f64]>,
    ) -> Result<RecommendationScores> {
        if seq.variant != PromptVariant::Recommendation {
            return Err(Error::InvalidArgument(format!(
                "{:?} is not a recommendation sequence",
                seq.variant
            )));
        }
        let context = self.backend.encode(&seq.text);
        self.head
            .score(&self.embeddings, &context, assist, candidates)
    }

    /// Predict from an already-built (possibly assisted) sequence.
    pub fn predict_sequence(
        &self,
        instance: &TaskInstance,
        seq: &PromptSequence,
        assist: Option<&[f64]>,
    ) -> Result<CrsOutput> {
        let kind = instance.kind();
        if seq.variant.kind() != kind {
            return Err(Error::InvalidArgument(format!(
                "{:?} sequence for a {kind} instance",
                seq.variant
            )));
        }
        if kind == TaskKind::Recommendation {
            let ids: Vec<String> = instance
                .candidates
                .iter()
                .map(|c| c.product.product_id.clone())
                .collect();
            let scores = self.score_candidates(seq, &ids, assist)?;
            return Ok(CrsOutput {
                prediction: CrsPrediction::Scores(scores),
                raw_text: None,
                parse_ok: true,
                dropped: Vec::new(),
            });
        }
        let text = self
            .backend
            .generate_with(&seq.text, &seq.task_prompt, &self.decode);
        if kind == TaskKind::Generation {
            return Ok(CrsOutput {
                parse_ok: !text.trim().is_empty(),
                prediction: CrsPrediction::Response(text.clone()),
                raw_text: Some(text),
                dropped: Vec::new(),
            });
        }
        let parsed = parse_structured_output(&text, kind);
        let parse_ok = parsed.dropped.is_empty();
        let prediction = if kind == TaskKind::Understanding {
            CrsPrediction::Frames(parsed.frames)
        } else {
            CrsPrediction::Attributes(parsed.attributes)
        };
        Ok(CrsOutput {
            prediction,
            raw_text: Some(text),
            parse_ok,
            dropped: parsed.dropped,
        })
    }

    pub fn predict(&self, instance: &TaskInstance) -> Result<CrsOutput> {
        let seq = self.prompt_for(instance)?;
        self.predict_sequence(instance, &seq, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            special_tokens: special_token_list(),
            backend_kind: self.backend.kind().to_string(),
            backend_blob: self.backend.to_blob()?,
            head: self.head.clone(),
            embeddings: self.embeddings.clone(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint, refusing one written under a different special
    /// token set.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        let expected = special_token_list();
        if ckpt.special_tokens != expected {
            return Err(Error::Checkpoint(format!(
                "special tokens {:?} differ from {:?}",
                ckpt.special_tokens, expected
            )));
        }
        let backend: Box<dyn Seq2SeqBackend> = match ckpt.backend_kind.as_str() {
            "tiny" => Box::new(TinySeq2Seq::from_blob(&ckpt.backend_blob)?),
            "gold-echo" => {
                let mut b: GoldEchoBackend = serde_json::from_str(&ckpt.backend_blob)?;
                b = b.reindexed();
                Box::new(b)
            }
            other => return Err(Error::Checkpoint(format!("unknown backend kind {other:?}"))),
        };
        UnifiedCrs::new(backend, ckpt.head, ckpt.embeddings)
    }
}

//! The four pre-sales dialogue tasks and their instances.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Dialogue, DialogueTurn, Product, Role, SemanticFrame};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Maximum number of recommendation candidates shown to a model.
pub const CANDIDATE_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Understanding,
    Elicitation,
    Recommendation,
    Generation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Understanding,
        TaskKind::Elicitation,
        TaskKind::Recommendation,
        TaskKind::Generation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Understanding => "understanding",
            TaskKind::Elicitation => "elicitation",
            TaskKind::Recommendation => "recommendation",
            TaskKind::Generation => "generation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind {s:?}")))
    }
}

/// Letter label of the `i`-th candidate (`A` for 0).
pub fn candidate_label(i: usize) -> char {
    assert!(
        i < CANDIDATE_LIMIT,
        "candidate index {i} beyond the {CANDIDATE_LIMIT}-candidate limit"
    );
    (b'A' + i as u8) as char
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: char,
    pub product: Product,
}

/// Gold output of an instance; the variant is the task kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskGold {
    Understanding { gold_frames: Vec<SemanticFrame> },
    Elicitation { gold_attributes: Vec<String> },
    Recommendation { gold_product: String },
    Generation { gold_response: String },
}

impl TaskGold {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskGold::Understanding { .. } => TaskKind::Understanding,
            TaskGold::Elicitation { .. } => TaskKind::Elicitation,
            TaskGold::Recommendation { .. } => TaskKind::Recommendation,
            TaskGold::Generation { .. } => TaskKind::Generation,
        }
    }
}

/// Identifies an instance within a corpus. `sub_index` separates several
/// products recommended at the same turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceKey {
    pub dialogue_id: String,
    pub cut_index: usize,
    pub kind: TaskKind,
    #[serde(default)]
    pub sub_index: usize,
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}:{}", self.dialogue_id, self.cut_index, self.kind)?;
        if self.sub_index > 0 {
            write!(f, ".{}", self.sub_index)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub dialogue_id: String,
    pub category: String,
    pub cut_index: usize,
    #[serde(default)]
    pub sub_index: usize,
    /// Turns strictly before `cut_index`.
    pub context: Vec<DialogueTurn>,
    /// The turn being understood (understanding only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current: Option<DialogueTurn>,
    #[serde(flatten)]
    pub gold: TaskGold,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub behaviors: Vec<String>,
    /// Attributes the response should elicit (generation only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guide_attributes: Vec<String>,
    /// Products the response should recommend (generation only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guide_products: Vec<String>,
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        self.gold.kind()
    }

    pub fn key(&self) -> InstanceKey {
        InstanceKey {
            dialogue_id: self.dialogue_id.clone(),
            cut_index: self.cut_index,
            kind: self.kind(),
            sub_index: self.sub_index,
        }
    }

    pub fn gold_frames(&self) -> Option<&[SemanticFrame]> {
        match &self.gold {
            TaskGold::Understanding { gold_frames } => Some(gold_frames),
            _ => None,
        }
    }

    pub fn gold_attributes(&self) -> Option<&[String]> {
        match &self.gold {
            TaskGold::Elicitation { gold_attributes } => Some(gold_attributes),
            _ => None,
        }
    }

    pub fn gold_product(&self) -> Option<&str> {
        match &self.gold {
            TaskGold::Recommendation { gold_product } => Some(gold_product),
            _ => None,
        }
    }

    pub fn gold_response(&self) -> Option<&str> {
        match &self.gold {
            TaskGold::Generation { gold_response } => Some(gold_response),
            _ => None,
        }
    }

    /// Label of the candidate carrying `product_id`.
    pub fn label_of(&self, product_id: &str) -> Option<char> {
        self.candidates
            .iter()
            .find(|c| c.product.product_id == product_id)
            .map(|c| c.label)
    }

    pub fn product_of(&self, label: char) -> Option<&Product> {
        self.candidates
            .iter()
            .find(|c| c.label == label)
            .map(|c| &c.product)
    }

    /// User-stated needs accumulated over the context (and the current turn
    /// when present), in order of appearance.
    pub fn acquired_needs(&self) -> Vec<SemanticFrame> {
        self.context
            .iter()
            .chain(self.current.as_ref())
            .filter(|t| t.role() == Role::User)
            .flat_map(|t| t.frames.iter().cloned())
            .collect()
    }
}

fn base(d: &Dialogue, cut: usize, gold: TaskGold) -> TaskInstance {
    TaskInstance {
        dialogue_id: d.dialogue_id.clone(),
        category: d.category.clone(),
        cut_index: cut,
        sub_index: 0,
        context: d.turns[..cut].to_vec(),
        current: None,
        gold,
        candidates: Vec::new(),
        behaviors: d.user_behaviors.clone(),
        guide_attributes: Vec::new(),
        guide_products: Vec::new(),
    }
}

/// Instances of one task kind in a dialogue. Dialogues without the labels
/// a task needs yield nothing.
pub fn extract_task_instances(d: &Dialogue, kind: TaskKind) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    for (cut, turn) in d.turns.iter().enumerate() {
        match kind {
            TaskKind::Understanding if !turn.frames.is_empty() => {
                let mut inst = base(
                    d,
                    cut,
                    TaskGold::Understanding {
                        gold_frames: turn.frames.clone(),
                    },
                );
                inst.current = Some(turn.clone());
                out.push(inst);
            }
            TaskKind::Elicitation
                if turn.role() == Role::System && !turn.elicit_attributes.is_empty() =>
            {
                out.push(base(
                    d,
                    cut,
                    TaskGold::Elicitation {
                        gold_attributes: turn.elicit_attributes.clone(),
                    },
                ));
            }
            TaskKind::Recommendation if turn.role() == Role::System => {
                for (sub, pid) in turn.recommended_products.iter().enumerate() {
                    let mut inst = base(
                        d,
                        cut,
                        TaskGold::Recommendation {
                            gold_product: pid.clone(),
                        },
                    );
                    inst.sub_index = sub;
                    out.push(inst);
                }
            }
            TaskKind::Generation if turn.role() == Role::System => {
                let mut inst = base(
                    d,
                    cut,
                    TaskGold::Generation {
                        gold_response: turn.utterance.text.clone(),
                    },
                );
                inst.guide_attributes = turn.elicit_attributes.clone();
                inst.guide_products = turn.recommended_products.clone();
                out.push(inst);
            }
            _ => {}
        }
    }
    out
}

/// Attach exactly [`CANDIDATE_LIMIT`] letter-labelled candidates: the gold
/// product plus uniformly drawn distractors, in a seed-determined order.
pub fn sample_candidates(
    instance: &TaskInstance,
    catalog: &Catalog,
    seed: u64,
) -> Result<TaskInstance> {
    let gold = instance.gold_product().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} is not a recommendation instance",
            instance.key()
        ))
    })?;
    let gold_product = catalog
        .get(gold)
        .ok_or_else(|| Error::UnknownProduct(gold.to_string()))?;
    if catalog.len() < CANDIDATE_LIMIT {
        return Err(Error::Precondition(format!(
            "catalog {} has {} products, need at least {CANDIDATE_LIMIT}",
            catalog.category.id,
            catalog.len()
        )));
    }
    let key = instance.key();
    let cut = key.cut_index.to_string();
    let sub = key.sub_index.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["candidates", &key.dialogue_id, &cut, &sub],
    ));

    let others: Vec<&Product> = catalog
        .products()
        .iter()
        .filter(|p| p.product_id != gold)
        .collect();
    let mut chosen: Vec<&Product> = sample(&mut rng, others.len(), CANDIDATE_LIMIT - 1)
        .into_iter()
        .map(|i| others[i])
        .collect();
    let position = rng.gen_range(0..CANDIDATE_LIMIT);
    chosen.insert(position, gold_product);

    let mut out = instance.clone();
    out.candidates = chosen
        .into_iter()
        .enumerate()
        .map(|(i, p)| Candidate {
            label: candidate_label(i),
            product: p.clone(),
        })
        .collect();
    Ok(out)
}

/// Instances of every kind for a set of dialogues, recommendation instances
/// already carrying candidates.
pub fn build_instances(
    dialogues: &[Dialogue],
    catalog: &Catalog,
    kind: TaskKind,
    candidate_seed: u64,
) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for d in dialogues {
        for inst in extract_task_instances(d, kind) {
            if kind == TaskKind::Recommendation {
                out.push(sample_candidates(&inst, catalog, candidate_seed)?);
            } else {
                out.push(inst);
            }
        }
    }
    Ok(out)
}

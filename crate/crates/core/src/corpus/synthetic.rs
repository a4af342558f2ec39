//! Seeded template generator standing in for a real annotated corpus.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AttributeSpec, Catalog, Category, CategoryCorpus, DatasetSplit, Dialogue, DialogueTurn,
    Product, Role, SemanticFrame, Utterance,
};
use crate::error::{Error, Result};

const ATTRIBUTE_POOL: &[(&str, &[&str])] = &[
    (
        "color",
        &[
            "red", "blue", "black", "white", "green", "pink", "grey", "brown",
        ],
    ),
    (
        "size",
        &["small", "medium", "large", "oversized", "petite", "tall"],
    ),
    (
        "material",
        &["cotton", "leather", "silk", "wool", "denim", "linen"],
    ),
    (
        "style",
        &[
            "casual",
            "formal",
            "sporty",
            "vintage",
            "classic",
            "minimalist",
        ],
    ),
    ("price", &["cheap", "affordable", "premium", "luxury"]),
    (
        "brand",
        &["acme", "zenith", "nova", "orbit", "vertex", "lumen"],
    ),
    ("season", &["summer", "winter", "spring", "autumn"]),
    ("fit", &["slim", "loose", "regular", "relaxed"]),
    (
        "pattern",
        &["plain", "striped", "checked", "floral", "dotted"],
    ),
    ("weight", &["light", "heavy", "featherweight", "sturdy"]),
];

/// Parameters of the synthetic corpus. Every category shares the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub categories: Vec<String>,
    pub attributes: usize,
    pub values_per_attribute: usize,
    pub products: usize,
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub seed: u64,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_valid_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.1
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            categories: vec!["Shoes".to_string()],
            attributes: 5,
            values_per_attribute: 4,
            products: 50,
            dialogues: 200,
            min_turns: 4,
            max_turns: 10,
            seed: 7,
            valid_fraction: default_valid_fraction(),
            test_fraction: default_test_fraction(),
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Precondition(m));
        if self.categories.is_empty() {
            return fail("at least one category is required".into());
        }
        if self.attributes < 2 {
            return fail(format!(
                "need at least 2 attributes per category, got {}",
                self.attributes
            ));
        }
        if self.values_per_attribute < 2 {
            return fail(format!(
                "need at least 2 values per attribute, got {}",
                self.values_per_attribute
            ));
        }
        if self.products < 21 {
            return fail(format!(
                "need at least 21 products per category, got {}",
                self.products
            ));
        }
        if self.min_turns < 4 || self.max_turns < self.min_turns {
            return fail(format!(
                "turn range {}..={} must start at 4 or more",
                self.min_turns, self.max_turns
            ));
        }
        if !(0.0..1.0).contains(&(self.valid_fraction + self.test_fraction)) {
            return fail("valid and test fractions must sum below 1".into());
        }
        Ok(())
    }
}

fn category_id(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect()
}

fn build_schema(spec: &SyntheticSpec) -> Vec<AttributeSpec> {
    (0..spec.attributes)
        .map(|i| {
            let (name, pool) = ATTRIBUTE_POOL
                .get(i)
                .map(|(n, p)| (n.to_string(), *p))
                .unwrap_or_else(|| (format!("feature{i}"), &[][..]));
            let values = (0..spec.values_per_attribute)
                .map(|j| {
                    pool.get(j)
                        .map(|v| v.to_string())
                        .unwrap_or_else(|| format!("{name}{j}"))
                })
                .collect();
            AttributeSpec { name, values }
        })
        .collect()
}

struct TurnBuilder {
    turns: Vec<DialogueTurn>,
}

impl TurnBuilder {
    fn push(&mut self, role: Role, text: String) -> &mut DialogueTurn {
        let turn_index = self.turns.len();
        self.turns.push(DialogueTurn {
            utterance: Utterance {
                role,
                text,
                turn_index,
            },
            frames: Vec::new(),
            elicit_attributes: Vec::new(),
            recommended_products: Vec::new(),
        });
        self.turns.last_mut().unwrap()
    }
}

fn opening_text(rng: &mut ChaCha8Rng, values: &[&str], noun: &str) -> String {
    match values {
        [v] => match rng.gen_range(0..3) {
            0 => format!("I want a {v} {noun}"),
            1 => format!("Do you have {v} {noun} ?"),
            _ => format!("Looking for something {v}"),
        },
        [a, b] => match rng.gen_range(0..2) {
            0 => format!("I want a {a} and {b} {noun}"),
            _ => format!("Do you have {a} {b} {noun} ?"),
        },
        _ => unreachable!("opening reveals one or two values"),
    }
}

fn elicit_text(rng: &mut ChaCha8Rng, attr: &str) -> String {
    match rng.gen_range(0..3) {
        0 => format!("Which {attr} do you prefer ?"),
        1 => format!("What {attr} would you like ?"),
        _ => format!("Any preference on {attr} ?"),
    }
}

fn answer_text(rng: &mut ChaCha8Rng, value: &str) -> String {
    match rng.gen_range(0..3) {
        0 => format!("{value} please"),
        1 => format!("I prefer {value}"),
        _ => format!("{value} would be great"),
    }
}

fn recommend_text(product_id: &str, values: &[&str]) -> String {
    let listed = match values {
        [] => String::new(),
        [v] => v.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    format!("I recommend {product_id} which is {listed}")
}

fn generate_dialogue(
    rng: &mut ChaCha8Rng,
    dialogue_id: String,
    catalog: &Catalog,
    spec: &SyntheticSpec,
) -> Dialogue {
    let category = &catalog.category;
    let noun = category.name.to_lowercase();
    let products = catalog.products();
    let target = &products[rng.gen_range(0..products.len())];
    let n_turns = rng.gen_range(spec.min_turns..=spec.max_turns);

    let mut order: Vec<&AttributeSpec> = category.attribute_schema.iter().collect();
    order.shuffle(rng);
    let value_of = |a: &AttributeSpec| target.attributes[&a.name].clone();

    let opening_count = if order.len() > 2 && rng.gen_bool(0.3) {
        2
    } else {
        1
    };
    let rounds = ((n_turns - 2) / 2).min(order.len() - opening_count).max(1);

    let mut b = TurnBuilder { turns: Vec::new() };
    let opening: Vec<&AttributeSpec> = order[..opening_count].to_vec();
    let opening_values: Vec<String> = opening.iter().map(|a| value_of(a)).collect();
    let refs: Vec<&str> = opening_values.iter().map(String::as_str).collect();
    let text = opening_text(rng, &refs, &noun);
    let t = b.push(Role::User, text);
    for (a, v) in opening.iter().zip(&opening_values) {
        t.frames.push(SemanticFrame::new(a.name.clone(), v.clone()));
    }

    let mut revealed: Vec<String> = opening_values.clone();
    for attr in &order[opening_count..opening_count + rounds] {
        let text = elicit_text(rng, &attr.name);
        let with_frame = rng.gen_bool(0.5);
        let t = b.push(Role::System, text);
        t.elicit_attributes.push(attr.name.clone());
        if with_frame {
            t.frames.push(SemanticFrame::new(attr.name.clone(), ""));
        }
        let value = value_of(attr);
        let text = answer_text(rng, &value);
        let t = b.push(Role::User, text);
        t.frames
            .push(SemanticFrame::new(attr.name.clone(), value.clone()));
        revealed.push(value);
    }

    let refs: Vec<&str> = revealed.iter().map(String::as_str).collect();
    let t = b.push(Role::System, recommend_text(&target.product_id, &refs));
    t.recommended_products.push(target.product_id.clone());

    while b.turns.len() < n_turns {
        if b.turns.len() % 2 == 0 {
            b.push(Role::User, "ok thanks".to_string());
        } else {
            b.push(Role::System, "You are welcome".to_string());
        }
    }

    let mut behaviors = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let p = &products[rng.gen_range(0..products.len())];
        behaviors.push(p.product_id.clone());
    }
    if rng.gen_bool(0.5) {
        let at = rng.gen_range(0..=behaviors.len());
        behaviors.insert(at, target.product_id.clone());
    }

    Dialogue {
        dialogue_id,
        category: category.id.clone(),
        turns: b.turns,
        user_behaviors: behaviors,
    }
}

/// Generate one catalog and split per category. Deterministic in `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<CategoryCorpus>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema = build_schema(spec);
    let mut out = Vec::with_capacity(spec.categories.len());
    let mut seen_ids = HashSet::new();
    for name in &spec.categories {
        let id = category_id(name);
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Precondition(format!("duplicate category {name:?}")));
        }
        let category = Category::new(id.clone(), name.clone(), schema.clone())?;
        let products = (0..spec.products)
            .map(|i| Product {
                product_id: format!("{id}-P{i:03}"),
                category: id.clone(),
                attributes: category
                    .attribute_schema
                    .iter()
                    .map(|a| {
                        let v = &a.values[rng.gen_range(0..a.values.len())];
                        (a.name.clone(), v.clone())
                    })
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect();
        let catalog = Catalog::new(category, products)?;

        let mut dialogues: Vec<Dialogue> = (0..spec.dialogues)
            .map(|i| generate_dialogue(&mut rng, format!("{id}-d{i:05}"), &catalog, spec))
            .collect();
        dialogues.shuffle(&mut rng);
        let n = dialogues.len();
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        let n_valid = (n as f64 * spec.valid_fraction).round() as usize;
        let test = dialogues.split_off(n - n_test);
        let valid = dialogues.split_off(n - n_test - n_valid);
        let split = DatasetSplit::new(dialogues, valid, test)?;
        out.push(CategoryCorpus { catalog, split });
    }
    Ok(out)
}

/// Check that every recommended product carries every user value stated so
/// far. Returns the offending (turn, product) pairs.
pub fn check_consistency(dialogue: &Dialogue, catalog: &Catalog) -> Vec<(usize, String)> {
    let mut needs: Vec<&SemanticFrame> = Vec::new();
    let mut bad = Vec::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        for pid in &turn.recommended_products {
            let ok = catalog.get(pid).is_some_and(|p| {
                needs
                    .iter()
                    .all(|f| p.attributes.get(&f.attribute) == Some(&f.value))
            });
            if !ok {
                bad.push((i, pid.clone()));
            }
        }
        if turn.role() == Role::User {
            needs.extend(turn.frames.iter().filter(|f| !f.value.is_empty()));
        }
    }
    bad
}

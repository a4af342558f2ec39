//! Annotated pre-sales dialogues, product catalogs and dataset splits.

mod loader;
mod synthetic;
mod validate;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_uneed_format, write_uneed_format, LoadedCorpus};
pub use synthetic::{check_consistency, generate_synthetic_corpus, SyntheticSpec};
pub use validate::{validate_dialogue, Violation};

/// One attribute of a category schema with its finite value vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub name: String,
    pub attribute_schema: Vec<AttributeSpec>,
}

impl Category {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        attribute_schema: Vec<AttributeSpec>,
    ) -> Result<Self> {
        let category = Category {
            id: id.into(),
            name: name.into(),
            attribute_schema,
        };
        let mut seen = HashSet::new();
        for spec in &category.attribute_schema {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate attribute {:?} in category {}",
                    spec.name, category.id
                )));
            }
            if spec.values.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "attribute {:?} in category {} has an empty vocabulary",
                    spec.name, category.id
                )));
            }
        }
        Ok(category)
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attribute_schema.iter().find(|a| a.name == name)
    }

    /// Position of an attribute in schema order.
    pub fn attribute_rank(&self, name: &str) -> Option<usize> {
        self.attribute_schema.iter().position(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub category: String,
    pub attributes: BTreeMap<String, String>,
}

impl Product {
    /// Attribute/value pairs in the schema order of `category`; attributes
    /// missing from the schema come last in key order.
    pub fn attributes_in_schema_order<'a>(
        &'a self,
        category: &Category,
    ) -> Vec<(&'a str, &'a str)> {
        let mut pairs: Vec<(&str, &str)> = self
            .attributes
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        pairs.sort_by_key(|(k, _)| category.attribute_rank(k).unwrap_or(usize::MAX));
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::System => f.write_str("system"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub turn_index: usize,
}

/// An (attribute, value) pair expressing a need. System-side frames may
/// carry an empty value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticFrame {
    pub attribute: String,
    pub value: String,
}

impl SemanticFrame {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Self {
        SemanticFrame {
            attribute: attribute.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub utterance: Utterance,
    pub frames: Vec<SemanticFrame>,
    pub elicit_attributes: Vec<String>,
    pub recommended_products: Vec<String>,
}

impl DialogueTurn {
    pub fn role(&self) -> Role {
        self.utterance.role
    }

    pub fn index(&self) -> usize {
        self.utterance.turn_index
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub category: String,
    pub turns: Vec<DialogueTurn>,
    pub user_behaviors: Vec<String>,
}

/// Products of one category, indexed by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CatalogRepr", into = "CatalogRepr")]
pub struct Catalog {
    pub category: Category,
    products: Vec<Product>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    category: Category,
    products: Vec<Product>,
}

impl TryFrom<CatalogRepr> for Catalog {
    type Error = Error;

    fn try_from(repr: CatalogRepr) -> Result<Self> {
        Catalog::new(repr.category, repr.products)
    }
}

impl From<Catalog> for CatalogRepr {
    fn from(c: Catalog) -> Self {
        CatalogRepr {
            category: c.category,
            products: c.products,
        }
    }
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.category == other.category && self.products == other.products
    }
}

impl Catalog {
    pub fn new(category: Category, products: Vec<Product>) -> Result<Self> {
        let mut index = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            if index.insert(p.product_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate product id {:?}",
                    p.product_id
                )));
            }
            if p.category != category.id {
                return Err(Error::InvalidArgument(format!(
                    "product {} belongs to category {}, not {}",
                    p.product_id, p.category, category.id
                )));
            }
            for (attr, value) in &p.attributes {
                let spec = category.attribute(attr).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "product {} uses attribute {:?} outside the schema",
                        p.product_id, attr
                    ))
                })?;
                if !spec.values.contains(value) {
                    return Err(Error::InvalidArgument(format!(
                        "product {} has value {:?} outside the vocabulary of {:?}",
                        p.product_id, value, attr
                    )));
                }
            }
        }
        Ok(Catalog {
            category,
            products,
            index,
        })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, product_id: &str) -> Option<&Product> {
        self.index.get(product_id).map(|&i| &self.products[i])
    }

    pub fn contains(&self, product_id: &str) -> bool {
        self.index.contains_key(product_id)
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl DatasetSplit {
    pub fn new(train: Vec<Dialogue>, valid: Vec<Dialogue>, test: Vec<Dialogue>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in train.iter().chain(&valid).chain(&test) {
            if !seen.insert(d.dialogue_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "dialogue {} appears in more than one split",
                    d.dialogue_id
                )));
            }
        }
        Ok(DatasetSplit { train, valid, test })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Catalog and dialogues of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCorpus {
    pub catalog: Catalog,
    pub split: DatasetSplit,
}

/// Map full-width colon and semicolon to ASCII and trim.
pub fn normalize_label(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            '：' => ':',
            '；' => ';',
            '，' => ',',
            c => c,
        })
        .collect::<String>()
        .trim()
        .to_string()
}

/// Flatten turns into `Role: text` pieces joined by `separator`.
pub fn flatten_turns(turns: &[DialogueTurn], labels: (&str, &str), separator: &str) -> String {
    turns
        .iter()
        .map(|t| {
            let label = match t.role() {
                Role::User => labels.0,
                Role::System => labels.1,
            };
            format!("{}{}", label, t.utterance.text)
        })
        .collect::<Vec<_>>()
        .join(separator)
}

pub const DEFAULT_SEPARATOR: &str = "[SEP]";

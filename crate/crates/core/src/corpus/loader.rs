//! Line-delimited corpus files, one dialogue file per category.
//!
//! Layout under a corpus root:
//!
//! * `<id>.dialogues.jsonl`: one dialogue per line with keys `dialogue_id`,
//!   `category`, `split`, `turns[]` (`role`, `text`, `frames[]`, `elicit[]`,
//!   `recommend[]`) and `behaviors[]`.
//! * `<id>.catalog.jsonl`: one product per line with keys `product_id`,
//!   `category`, `attributes{}`.
//! * `<id>.schema.json` (optional): category name and attribute schema. When
//!   absent the schema is inferred from the catalog.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::validate::validate_dialogue;
use super::{
    normalize_label, AttributeSpec, Catalog, Category, CategoryCorpus, DatasetSplit, Dialogue,
    DialogueTurn, Product, Role, SemanticFrame, Utterance,
};
use crate::error::{Error, Result};

const DIALOGUE_SUFFIX: &str = ".dialogues.jsonl";
const CATALOG_SUFFIX: &str = ".catalog.jsonl";
const SCHEMA_SUFFIX: &str = ".schema.json";

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    attribute: String,
    #[serde(default)]
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    role: Role,
    text: String,
    #[serde(default)]
    frames: Vec<FrameRecord>,
    #[serde(default)]
    elicit: Vec<String>,
    #[serde(default)]
    recommend: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueRecord {
    dialogue_id: String,
    category: String,
    #[serde(default = "default_split")]
    split: String,
    turns: Vec<TurnRecord>,
    #[serde(default)]
    behaviors: Vec<String>,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct ProductRecord {
    product_id: String,
    category: String,
    attributes: BTreeMap<String, String>,
}

impl From<DialogueRecord> for Dialogue {
    fn from(r: DialogueRecord) -> Self {
        let turns = r
            .turns
            .into_iter()
            .enumerate()
            .map(|(i, t)| DialogueTurn {
                utterance: Utterance {
                    role: t.role,
                    text: t.text,
                    turn_index: i,
                },
                frames: t
                    .frames
                    .into_iter()
                    .map(|f| {
                        SemanticFrame::new(normalize_label(&f.attribute), normalize_label(&f.value))
                    })
                    .collect(),
                elicit_attributes: t.elicit.iter().map(|a| normalize_label(a)).collect(),
                recommended_products: t.recommend,
            })
            .collect();
        Dialogue {
            dialogue_id: r.dialogue_id,
            category: r.category,
            turns,
            user_behaviors: r.behaviors,
        }
    }
}

fn to_record(d: &Dialogue, split: &str) -> DialogueRecord {
    DialogueRecord {
        dialogue_id: d.dialogue_id.clone(),
        category: d.category.clone(),
        split: split.to_string(),
        turns: d
            .turns
            .iter()
            .map(|t| TurnRecord {
                role: t.role(),
                text: t.utterance.text.clone(),
                frames: t
                    .frames
                    .iter()
                    .map(|f| FrameRecord {
                        attribute: f.attribute.clone(),
                        value: f.value.clone(),
                    })
                    .collect(),
                elicit: t.elicit_attributes.clone(),
                recommend: t.recommended_products.clone(),
            })
            .collect(),
        behaviors: d.user_behaviors.clone(),
    }
}

/// Everything loaded from a corpus root, keyed by category id.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub categories: BTreeMap<String, CategoryCorpus>,
}

impl LoadedCorpus {
    /// Dialogue counts keyed by category display name.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.categories
            .values()
            .map(|c| (c.catalog.category.name.clone(), c.split.len()))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.categories.values().map(|c| c.split.len()).sum()
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn malformed(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn load_catalog(root: &Path, id: &str) -> Result<Catalog> {
    let path = root.join(format!("{id}{CATALOG_SUFFIX}"));
    let mut products = Vec::new();
    for (line, text) in read_lines(&path)? {
        let rec: ProductRecord =
            serde_json::from_str(&text).map_err(|e| malformed(&path, line, e.to_string()))?;
        if rec.category != id {
            return Err(malformed(
                &path,
                line,
                format!(
                    "product category {:?} does not match file category {id:?}",
                    rec.category
                ),
            ));
        }
        products.push(Product {
            product_id: rec.product_id,
            category: rec.category,
            attributes: rec
                .attributes
                .into_iter()
                .map(|(k, v)| (normalize_label(&k), normalize_label(&v)))
                .collect(),
        });
    }
    let schema_path = root.join(format!("{id}{SCHEMA_SUFFIX}"));
    let category = if schema_path.exists() {
        let text = fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
        let category: Category =
            serde_json::from_str(&text).map_err(|e| malformed(&schema_path, 1, e.to_string()))?;
        Category::new(category.id, category.name, category.attribute_schema)?
    } else {
        infer_category(id, &products)?
    };
    Catalog::new(category, products).map_err(|e| malformed(&path, 0, e.to_string()))
}

fn infer_category(id: &str, products: &[Product]) -> Result<Category> {
    let mut schema: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in products {
        for (k, v) in &p.attributes {
            schema.entry(k).or_default().insert(v);
        }
    }
    let attribute_schema = schema
        .into_iter()
        .map(|(name, values)| AttributeSpec {
            name: name.to_string(),
            values: values.into_iter().map(str::to_string).collect(),
        })
        .collect();
    Category::new(id, id, attribute_schema)
}

/// Load every category found under `root`.
pub fn load_uneed_format(root: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(DIALOGUE_SUFFIX) {
            ids.insert(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(Error::NoCategoryFiles(root.to_path_buf()));
    }

    let mut categories = BTreeMap::new();
    for id in ids {
        let catalog = load_catalog(root, &id)?;
        let path = root.join(format!("{id}{DIALOGUE_SUFFIX}"));
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let mut orphans = BTreeSet::new();
        for (line, text) in read_lines(&path)? {
            let rec: DialogueRecord =
                serde_json::from_str(&text).map_err(|e| malformed(&path, line, e.to_string()))?;
            let split = rec.split.clone();
            let dialogue = Dialogue::from(rec);
            for v in validate_dialogue(&dialogue, &catalog) {
                match v {
                    super::Violation::OrphanProduct { product_id } => {
                        orphans.insert(product_id);
                    }
                    other => {
                        return Err(malformed(
                            &path,
                            line,
                            format!("dialogue {}: {other}", dialogue.dialogue_id),
                        ))
                    }
                }
            }
            match split.as_str() {
                "train" => train.push(dialogue),
                "valid" | "validation" | "dev" => valid.push(dialogue),
                "test" => test.push(dialogue),
                other => return Err(malformed(&path, line, format!("unknown split {other:?}"))),
            }
        }
        if !orphans.is_empty() {
            return Err(Error::OrphanProducts {
                file: path,
                ids: orphans.into_iter().collect(),
            });
        }
        let split = DatasetSplit::new(train, valid, test)
            .map_err(|e| malformed(&path, 0, e.to_string()))?;
        log::info!("loaded {} dialogues for category {}", split.len(), id);
        categories.insert(id, CategoryCorpus { catalog, split });
    }
    Ok(LoadedCorpus { categories })
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(&r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write corpora in the layout read by [`load_uneed_format`]. Returns the
/// dialogue files written.
pub fn write_uneed_format<'a>(
    root: impl AsRef<Path>,
    corpora: impl IntoIterator<Item = &'a CategoryCorpus>,
) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut written = Vec::new();
    for corpus in corpora {
        let id = &corpus.catalog.category.id;
        let schema_path = root.join(format!("{id}{SCHEMA_SUFFIX}"));
        let schema = serde_json::to_string_pretty(&corpus.catalog.category)?;
        fs::write(&schema_path, schema).map_err(|e| Error::io(&schema_path, e))?;

        write_jsonl(
            &root.join(format!("{id}{CATALOG_SUFFIX}")),
            corpus.catalog.products().iter().map(|p| ProductRecord {
                product_id: p.product_id.clone(),
                category: p.category.clone(),
                attributes: p.attributes.clone(),
            }),
        )?;

        let path = root.join(format!("{id}{DIALOGUE_SUFFIX}"));
        let split = &corpus.split;
        let records = split
            .train
            .iter()
            .map(|d| to_record(d, "train"))
            .chain(split.valid.iter().map(|d| to_record(d, "valid")))
            .chain(split.test.iter().map(|d| to_record(d, "test")));
        write_jsonl(&path, records)?;
        written.push(path);
    }
    Ok(written)
}

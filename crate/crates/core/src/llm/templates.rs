//! Versioned instruction templates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskKind;

const BUILTIN: &str = include_str!("../../resources/instruction_templates.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTemplates {
    pub understanding: String,
    pub elicitation: String,
    pub recommendation: String,
    pub generation: String,
    pub dialogue: String,
    pub current_input: String,
    pub candidates: String,
    pub acquired_needs: String,
    pub guide_attributes: String,
    pub guide_products: String,
    pub user: String,
    pub system: String,
    pub candidate_prefix: String,
    pub candidate_pair: String,
    pub pair_separator: String,
    pub section_separator: String,
    #[serde(default)]
    pub category_names: BTreeMap<String, String>,
}

impl LanguageTemplates {
    pub fn instruction(&self, kind: TaskKind, category_name: &str) -> String {
        let template = match kind {
            TaskKind::Understanding => &self.understanding,
            TaskKind::Elicitation => &self.elicitation,
            TaskKind::Recommendation => &self.recommendation,
            TaskKind::Generation => &self.generation,
        };
        let name = self
            .category_names
            .get(category_name)
            .map_or(category_name, String::as_str);
        template.replace("{category}", name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TemplateFile {
    version: String,
    #[serde(flatten)]
    languages: BTreeMap<String, LanguageTemplates>,
}

/// One language of one template version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub language: String,
    pub text: LanguageTemplates,
}

impl TemplateSet {
    /// Parse a template file and select `language`.
    pub fn parse(source: &str, language: &str) -> Result<Self> {
        let file: TemplateFile = toml::from_str(source)
            .map_err(|e| Error::Config(format!("instruction templates: {e}")))?;
        let text = file
            .languages
            .get(language)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no {language:?} instruction templates")))?;
        Ok(TemplateSet {
            version: file.version,
            language: language.to_string(),
            text,
        })
    }

    pub fn builtin(language: &str) -> Result<Self> {
        Self::parse(BUILTIN, language)
    }

    pub fn english() -> Self {
        Self::builtin("en").expect("built-in English templates parse")
    }

    pub fn chinese() -> Self {
        Self::builtin("zh").expect("built-in Chinese templates parse")
    }

    /// `version/language`, recorded with every experiment.
    pub fn tag(&self) -> String {
        format!("{}/{}", self.version, self.language)
    }
}

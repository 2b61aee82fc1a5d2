//! Prompt rendering.
//!
//! Every string sent to a model is produced here: the three annotation
//! formats in two styles, the disambiguated binary prompt assembled from a
//! concept card, the partition queries, and the concept-acquisition
//! queries. Rendering is pure; templates are embedded constants that can
//! be overridden from a JSON file keyed by `format.style`.

use std::collections::HashMap;
use std::path::Path;

use crate::concepts::ConceptCard;
use crate::error::{Error, Result};
use crate::partition::PartitionMode;
use crate::vocab::CategoryVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptFormat {
    OpenEnded,
    MultiOption,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStyle {
    Simple,
    CarefullyDesigned,
}

/// What a prompt is about, when anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSubject {
    None,
    Category(usize),
    Group(usize),
}

/// A fully substituted prompt string ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Annotation format, when the prompt is an annotation query.
    pub format: Option<PromptFormat>,
    pub subject: PromptSubject,
}

const BINARY_SIMPLE: &str = "Is there a {object} in this image?. Answer with only yes or no.";
const BINARY_CAREFUL: &str =
    "Carefully examine the image and decide if it contains a {object}. Answer with only yes or no.";
const MULTI_SIMPLE: &str = "What objects are in this image? Candidates: {cls_list}. From this list, output only the names of the objects that are present, separated by commas. Do not include any object that is not in the candidate list. If none of the candidate objects are present, output exactly NO.";
const MULTI_CAREFUL: &str = "Carefully examine the image and decide which of the following candidate objects are present in the image. Candidates: {cls_list}. From this list, output only the names of the objects that are present, separated by commas. Do not include any object that is not in the candidate list. If none of the candidate objects are present, output exactly NO.";
const OPEN_ENDED: &str = "What objects are in this image?";
const PARTITION_CO: &str = "Based on the co-occurrence relationships among the categories, please divide these {n} categories into {m} groups, ensuring that the categories within each group frequently co-occur.";
const PARTITION_DISCO: &str = "Based on the co-occurrence relationships among the categories, please divide these {n} categories into {m} groups, ensuring that the categories within each group do not co-occur.";
const ANSWER_YES_NO: &str = "Answer with only yes or no.";
const CONCEPT_SUPER: &str = "Which super-category does {object} belong to? For example, an apple is a type of fruit, and a car is a type of vehicle.";
const CONCEPT_SIMILAR: &str = "Return up to five categories from the entire category set whose visual appearance is most similar to {object}, separated by commas. Category set: {cls_list}.";
const CONCEPT_AMBIGUITY: &str = "Does a category name {object} have multiple meanings? If so, please provide several concise phrases that can help eliminate its ambiguity.";

/// The template set used for rendering. `Default` holds the embedded
/// templates.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    binary_simple: String,
    binary_careful: String,
    multi_simple: String,
    multi_careful: String,
    open_ended: String,
    partition_co: String,
    partition_disco: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            binary_simple: BINARY_SIMPLE.into(),
            binary_careful: BINARY_CAREFUL.into(),
            multi_simple: MULTI_SIMPLE.into(),
            multi_careful: MULTI_CAREFUL.into(),
            open_ended: OPEN_ENDED.into(),
            partition_co: PARTITION_CO.into(),
            partition_disco: PARTITION_DISCO.into(),
        }
    }
}

impl PromptTemplates {
    /// Applies overrides from a JSON object keyed by `format.style`, e.g.
    /// `{"binary.simple": "..."}`. Recognized keys: `binary.simple`,
    /// `binary.carefully_designed`, `multi_option.simple`,
    /// `multi_option.carefully_designed`, `open_ended`, `partition.co`,
    /// `partition.disco`.
    pub fn with_overrides(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_override_json(&text)
    }

    pub fn with_override_json(json: &str) -> Result<Self> {
        let map: HashMap<String, String> = serde_json::from_str(json)
            .map_err(|e| Error::Prompt(format!("bad template file: {e}")))?;
        let mut templates = Self::default();
        for (key, value) in map {
            let slot = match key.as_str() {
                "binary.simple" => &mut templates.binary_simple,
                "binary.carefully_designed" => &mut templates.binary_careful,
                "multi_option.simple" => &mut templates.multi_simple,
                "multi_option.carefully_designed" => &mut templates.multi_careful,
                "open_ended" => &mut templates.open_ended,
                "partition.co" => &mut templates.partition_co,
                "partition.disco" => &mut templates.partition_disco,
                other => {
                    return Err(Error::Prompt(format!("unknown template key {other:?}")));
                }
            };
            *slot = value;
        }
        Ok(templates)
    }

    /// Yes/no query for one object name.
    pub fn render_binary(&self, style: PromptStyle, object_name: &str) -> Result<RenderedPrompt> {
        if object_name.is_empty() {
            return Err(Error::Prompt("binary prompt needs a non-empty object name".into()));
        }
        let template = match style {
            PromptStyle::Simple => &self.binary_simple,
            PromptStyle::CarefullyDesigned => &self.binary_careful,
        };
        Ok(RenderedPrompt {
            text: template.replace("{object}", object_name),
            format: Some(PromptFormat::Binary),
            subject: PromptSubject::None,
        })
    }

    /// Multi-option query over an ordered candidate list.
    pub fn render_multi_option(
        &self,
        style: PromptStyle,
        class_names: &[&str],
    ) -> Result<RenderedPrompt> {
        if class_names.is_empty() {
            return Err(Error::Prompt("multi-option prompt needs at least one candidate".into()));
        }
        let template = match style {
            PromptStyle::Simple => &self.multi_simple,
            PromptStyle::CarefullyDesigned => &self.multi_careful,
        };
        Ok(RenderedPrompt {
            text: template.replace("{cls_list}", &class_names.join(", ")),
            format: Some(PromptFormat::MultiOption),
            subject: PromptSubject::None,
        })
    }

    /// Unconstrained "what objects are present" query.
    pub fn render_open_ended(&self) -> RenderedPrompt {
        RenderedPrompt {
            text: self.open_ended.clone(),
            format: Some(PromptFormat::OpenEnded),
            subject: PromptSubject::None,
        }
    }

    /// Disambiguated yes/no query assembled from a concept card.
    ///
    /// Sentence order is fixed: the question with the category name
    /// replaced by the card's description, the super-category sentence,
    /// the negative-similar sentence (omitted when the card lists no
    /// similar categories), and the answer-format instruction last.
    pub fn render_cad_binary(
        &self,
        card: &ConceptCard,
        vocab: &CategoryVocabulary,
    ) -> Result<RenderedPrompt> {
        card.validate(vocab)?;
        let name = vocab.name(card.category);
        let mut text = format!(
            "Carefully examine the image and decide if it contains a {}. {} is a type of {}.",
            card.description, name, card.super_category
        );
        if !card.similar.is_empty() {
            let names: Vec<&str> = card.similar.iter().map(|&id| vocab.name(id)).collect();
            text.push_str(&format!(" {} does not refer to {}.", name, or_join(&names)));
        }
        text.push(' ');
        text.push_str(ANSWER_YES_NO);
        Ok(RenderedPrompt {
            text,
            format: Some(PromptFormat::Binary),
            subject: PromptSubject::Category(card.category),
        })
    }

    /// Query asking a model to partition `n` categories into `m` groups.
    /// The class list follows the instruction sentence, one name per line.
    pub fn render_partition_query(
        &self,
        mode: PartitionMode,
        n: usize,
        m: usize,
        class_names: &[&str],
    ) -> Result<RenderedPrompt> {
        if n != class_names.len() {
            return Err(Error::Prompt(format!(
                "partition query n={n} does not match {} class names",
                class_names.len()
            )));
        }
        if m == 0 || m > n {
            return Err(Error::Prompt(format!(
                "partition query needs 1 <= m <= n, got m={m}, n={n}"
            )));
        }
        let template = match mode {
            PartitionMode::Co => &self.partition_co,
            PartitionMode::Disco => &self.partition_disco,
        };
        let mut text = template
            .replace("{n}", &n.to_string())
            .replace("{m}", &m.to_string());
        for name in class_names {
            text.push('\n');
            text.push_str(name);
        }
        Ok(RenderedPrompt {
            text,
            format: None,
            subject: PromptSubject::None,
        })
    }

    /// The three concept-acquisition queries for one category:
    /// super-category, visually similar categories (with the full
    /// vocabulary listed), and ambiguity/description.
    pub fn render_concept_queries(
        &self,
        category_name: &str,
        vocab: &CategoryVocabulary,
    ) -> Result<[RenderedPrompt; 3]> {
        let id = vocab.id_of(category_name).ok_or_else(|| {
            Error::Prompt(format!("{category_name:?} is not a vocabulary category"))
        })?;
        let name = vocab.name(id);
        let cls_list = vocab
            .names()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ");
        let make = |text: String| RenderedPrompt {
            text,
            format: None,
            subject: PromptSubject::Category(id),
        };
        Ok([
            make(CONCEPT_SUPER.replace("{object}", name)),
            make(
                CONCEPT_SIMILAR
                    .replace("{object}", name)
                    .replace("{cls_list}", &cls_list),
            ),
            make(CONCEPT_AMBIGUITY.replace("{object}", name)),
        ])
    }
}

/// Joins names as "a", "a, or b", "a, b, or c".
fn or_join(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => (*one).to_string(),
        [init @ .., last] => format!("{}, or {}", init.join(", "), last),
    }
}

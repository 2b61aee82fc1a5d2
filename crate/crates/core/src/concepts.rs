//! Concept knowledge per category: super-category, visually similar
//! in-vocabulary categories, and a disambiguation description that
//! replaces the raw category name in verification prompts.
//!
//! Cards are acquired by asking a model three questions per category and
//! parsing the free-text replies, or supplied curated from a JSONL file.
//! The cache guarantees every persisted card satisfies the invariants.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{ConceptStep, ModelBackend, QueryKind};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplates;
use crate::vocab::CategoryVocabulary;

pub const MAX_SIMILAR: usize = 5;
pub const DESCRIPTION_PHRASES: usize = 3;

/// Ways a category name can fail to denote the intended concept.
/// Curated metadata; nothing in the pipeline branches on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisalignmentTag {
    SenseAmbiguity,
    HypernymOverreach,
    MisnomerUnderspecification,
}

/// Disambiguation knowledge for one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptCard {
    pub category: usize,
    pub super_category: String,
    /// Vocabulary ids of up to five visually similar categories the name
    /// must not be confused with.
    pub similar: Vec<usize>,
    /// Replaces the category name in the verification prompt. Equals the
    /// category name for unambiguous categories.
    pub description: String,
    pub ambiguous: bool,
    pub tag: Option<MisalignmentTag>,
}

impl ConceptCard {
    /// Card that changes nothing: description is the name itself, the
    /// super-category is the generic "object", no similar categories.
    pub fn identity(category: usize, vocab: &CategoryVocabulary) -> Self {
        ConceptCard {
            category,
            super_category: "object".into(),
            similar: Vec::new(),
            description: vocab.name(category).to_string(),
            ambiguous: false,
            tag: None,
        }
    }

    pub fn validate(&self, vocab: &CategoryVocabulary) -> Result<()> {
        let q = vocab.len();
        if self.category >= q {
            return Err(Error::Concept(format!(
                "card category id {} out of range for q={q}",
                self.category
            )));
        }
        let name = vocab.name(self.category);
        if self.super_category.is_empty() {
            return Err(Error::Concept(format!("card for {name:?} has an empty super-category")));
        }
        if self.description.is_empty() {
            return Err(Error::Concept(format!("card for {name:?} has an empty description")));
        }
        if !self.ambiguous && self.description != name {
            return Err(Error::Concept(format!(
                "unambiguous card for {name:?} must keep its own name as description, got {:?}",
                self.description
            )));
        }
        if self.similar.len() > MAX_SIMILAR {
            return Err(Error::Concept(format!(
                "card for {name:?} lists {} similar categories, at most {MAX_SIMILAR} allowed",
                self.similar.len()
            )));
        }
        for &s in &self.similar {
            if s >= q {
                return Err(Error::Concept(format!(
                    "card for {name:?} references similar category id {s} out of range"
                )));
            }
            if s == self.category {
                return Err(Error::Concept(format!(
                    "card for {name:?} lists itself as a similar category"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CardWire {
    category: String,
    super_category: String,
    similar: Vec<String>,
    description: String,
    ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<MisalignmentTag>,
}

/// Validated concept cards keyed by category id.
#[derive(Debug, Clone, Default)]
pub struct ConceptCache {
    cards: BTreeMap<usize, ConceptCard>,
}

impl ConceptCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn contains(&self, category: usize) -> bool {
        self.cards.contains_key(&category)
    }

    pub fn get(&self, category: usize) -> Option<&ConceptCard> {
        self.cards.get(&category)
    }

    pub fn insert(&mut self, card: ConceptCard, vocab: &CategoryVocabulary) -> Result<()> {
        card.validate(vocab)?;
        self.cards.insert(card.category, card);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptCard> {
        self.cards.values()
    }

    /// The stored card, or an identity card when none exists.
    pub fn card_or_identity(&self, category: usize, vocab: &CategoryVocabulary) -> ConceptCard {
        self.cards
            .get(&category)
            .cloned()
            .unwrap_or_else(|| ConceptCard::identity(category, vocab))
    }

    /// Loads a JSONL cache, rejecting any line that is corrupt or carries
    /// an invalid card; errors name the offending line.
    pub fn load(path: &Path, vocab: &CategoryVocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, vocab, path)
    }

    pub fn from_jsonl(text: &str, vocab: &CategoryVocabulary, path: &Path) -> Result<Self> {
        let mut cache = ConceptCache::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let wire: CardWire = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            let category = vocab.normalize_label(&wire.category).ok_or_else(|| {
                Error::parse(
                    path,
                    lineno + 1,
                    format!("unknown category {:?}", wire.category),
                )
            })?;
            let mut similar = Vec::new();
            for name in &wire.similar {
                let id = vocab.normalize_label(name).ok_or_else(|| {
                    Error::parse(path, lineno + 1, format!("unknown similar category {name:?}"))
                })?;
                similar.push(id);
            }
            let card = ConceptCard {
                category,
                super_category: wire.super_category,
                similar,
                description: wire.description,
                ambiguous: wire.ambiguous,
                tag: wire.tag,
            };
            card.validate(vocab)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            cache.cards.insert(category, card);
        }
        Ok(cache)
    }

    /// Writes the cache as JSONL via a temp file and atomic rename.
    pub fn save(&self, path: &Path, vocab: &CategoryVocabulary) -> Result<()> {
        let text = self.to_jsonl(vocab)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_jsonl(&self, vocab: &CategoryVocabulary) -> Result<String> {
        let mut out = String::new();
        for card in self.cards.values() {
            card.validate(vocab)?;
            let wire = CardWire {
                category: vocab.name(card.category).to_string(),
                super_category: card.super_category.clone(),
                similar: card.similar.iter().map(|&s| vocab.name(s).to_string()).collect(),
                description: card.description.clone(),
                ambiguous: card.ambiguous,
                tag: card.tag,
            };
            out.push_str(&serde_json::to_string(&wire).expect("card serialization cannot fail"));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Parses the super-category from a free-text reply: the phrase after the
/// last "type of" or "belongs to" in the first sentence, otherwise the
/// sentence's last word; articles and a trailing "category" word are
/// stripped and the result is lower-cased.
pub fn parse_super_category_reply(text: &str) -> String {
    let first_sentence = text
        .split(['.', '!', '?', '\n'])
        .find(|s| !s.trim().is_empty())
        .unwrap_or("")
        .to_lowercase();
    let tail = if let Some(pos) = first_sentence.rfind("type of") {
        first_sentence[pos + "type of".len()..].to_string()
    } else if let Some(pos) = first_sentence.rfind("belongs to") {
        first_sentence[pos + "belongs to".len()..].to_string()
    } else {
        let words: Vec<&str> = first_sentence.split_whitespace().collect();
        if words.len() <= 3 {
            first_sentence.clone()
        } else {
            words.last().map(|w| w.to_string()).unwrap_or_default()
        }
    };
    let mut words: Vec<&str> = tail
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-'))
        .filter(|w| !w.is_empty())
        .collect();
    while let Some(first) = words.first() {
        if ["a", "an", "the"].contains(first) {
            words.remove(0);
        } else {
            break;
        }
    }
    while let Some(last) = words.last() {
        if ["category", "super-category", "supercategory"].contains(last) {
            words.pop();
        } else {
            break;
        }
    }
    let phrase = words.join(" ");
    if phrase.is_empty() {
        "object".to_string()
    } else {
        phrase
    }
}

/// Resolves the similar-category reply against the vocabulary. Tokens
/// that do not resolve are dropped, the category itself is dropped, and
/// the list is truncated to [`MAX_SIMILAR`].
pub fn parse_similar_reply(text: &str, vocab: &CategoryVocabulary, category: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for token in text.split([',', ';', '\n']) {
        let token = strip_enumeration(token);
        if let Some(id) = vocab.normalize_label(token) {
            if id != category && !out.contains(&id) {
                out.push(id);
                if out.len() == MAX_SIMILAR {
                    break;
                }
            }
        }
    }
    out
}

/// Parses the ambiguity reply into (ambiguous, description).
///
/// A reply opening with a "no" token means the name is unambiguous and
/// the description stays the category name. Otherwise the first
/// [`DESCRIPTION_PHRASES`] phrases are joined with ", "; when no phrase
/// can be extracted the description falls back to the name.
pub fn parse_ambiguity_reply(text: &str, category_name: &str) -> (bool, String) {
    let trimmed = text.trim();
    let first_token: String = trimmed
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    if first_token == "no" {
        return (false, category_name.to_string());
    }
    let mut body = trimmed;
    if first_token == "yes" {
        body = body[3..].trim_start_matches([',', '.', ':', ';', '!']).trim_start();
    }
    // enumerated list items, when present, are the phrases
    let mut phrases: Vec<String> = body
        .lines()
        .filter(|l| looks_enumerated(l))
        .map(strip_enumeration)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect();
    if phrases.is_empty() {
        phrases = body
            .split('\n')
            .map(strip_enumeration)
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect();
        if phrases.len() < 2 {
            phrases = body
                .split([',', ';', '\n'])
                .map(strip_enumeration)
                .filter(|p| !p.is_empty())
                .map(str::to_string)
                .collect();
        }
    }
    phrases.truncate(DESCRIPTION_PHRASES);
    if phrases.is_empty() {
        (true, category_name.to_string())
    } else {
        (true, phrases.join(", "))
    }
}

/// A line shaped like a list item: "1. x", "2) y", "- z".
fn looks_enumerated(line: &str) -> bool {
    let line = line.trim_start();
    line.starts_with(|c: char| c.is_ascii_digit())
        && line
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .starts_with(['.', ')', ':'])
        || line.starts_with("- ")
        || line.starts_with("* ")
        || line.starts_with("• ")
}

/// Drops leading bullets/numbering and surrounding punctuation from a
/// listed phrase.
fn strip_enumeration(token: &str) -> &str {
    let token = token.trim();
    let token = token.trim_start_matches(|c: char| {
        c.is_ascii_digit() || c == '.' || c == ')' || c == '-' || c == '*' || c == '•' || c == ' '
    });
    token.trim().trim_matches('"').trim()
}

/// Asks the backend the three concept queries for one category and
/// assembles a card from the parsed replies.
pub fn acquire_concept(
    category: usize,
    vocab: &CategoryVocabulary,
    backend: &dyn ModelBackend,
    templates: &PromptTemplates,
) -> Result<ConceptCard> {
    let name = vocab.name(category);
    let [super_q, similar_q, ambiguity_q] = templates.render_concept_queries(name, vocab)?;
    let ask = |prompt, step| {
        backend
            .query(None, prompt, &QueryKind::Concept { step, category })
            .map_err(|e| Error::Concept(format!("category {name:?}: {e}")))
    };
    let super_reply = ask(&super_q, ConceptStep::SuperCategory)?;
    let similar_reply = ask(&similar_q, ConceptStep::Similar)?;
    let ambiguity_reply = ask(&ambiguity_q, ConceptStep::Ambiguity)?;

    let (ambiguous, description) = parse_ambiguity_reply(&ambiguity_reply.text, name);
    let card = ConceptCard {
        category,
        super_category: parse_super_category_reply(&super_reply.text),
        similar: parse_similar_reply(&similar_reply.text, vocab, category),
        description,
        ambiguous,
        tag: None,
    };
    card.validate(vocab)?;
    Ok(card)
}

/// Outcome of a batch acquisition.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AcquireStats {
    pub acquired: usize,
    pub cached: usize,
    pub fallbacks: usize,
}

/// Acquires cards for every vocabulary category, skipping ones already in
/// the cache unless `refresh` is set. When `identity_fallback` is set a
/// failed acquisition yields an identity card instead of aborting.
pub fn acquire_all(
    vocab: &Arc<CategoryVocabulary>,
    backend: &dyn ModelBackend,
    templates: &PromptTemplates,
    cache: &mut ConceptCache,
    refresh: bool,
    identity_fallback: bool,
) -> Result<AcquireStats> {
    let mut stats = AcquireStats::default();
    for category in 0..vocab.len() {
        if !refresh && cache.contains(category) {
            stats.cached += 1;
            continue;
        }
        match acquire_concept(category, vocab, backend, templates) {
            Ok(card) => {
                cache.insert(card, vocab)?;
                stats.acquired += 1;
            }
            Err(e) if identity_fallback => {
                eprintln!("warning: {e}; using identity card");
                cache.insert(ConceptCard::identity(category, vocab), vocab)?;
                stats.fallbacks += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

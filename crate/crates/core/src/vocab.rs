//! Category vocabulary, label algebra, and dataset record I/O.
//!
//! A vocabulary is an ordered list of category names with dense 0-based ids.
//! Free-text labels coming back from a model are matched against it through
//! [`CategoryVocabulary::normalize_label`]: canonical names first, then
//! aliases, then a singular/plural fallback.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Ordered category names plus an alias map from normalized surface forms
/// to category ids. Immutable after load; safe to share across threads.
#[derive(Debug, Clone)]
pub struct CategoryVocabulary {
    categories: Vec<String>,
    norm_to_id: HashMap<String, usize>,
    aliases: HashMap<String, usize>,
}

impl CategoryVocabulary {
    /// Builds a vocabulary from category names. Ids are assigned in order.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = CategoryVocabulary {
            categories: Vec::new(),
            norm_to_id: HashMap::new(),
            aliases: HashMap::new(),
        };
        for name in names {
            let name = name.into();
            let norm = normalize_surface(&name);
            if norm.is_empty() {
                return Err(Error::Vocab(format!(
                    "category name {name:?} is empty after normalization"
                )));
            }
            if let Some(&other) = vocab.norm_to_id.get(&norm) {
                return Err(Error::Vocab(format!(
                    "duplicate category name {name:?} (normalizes to the same form as id {other})"
                )));
            }
            let id = vocab.categories.len();
            vocab.norm_to_id.insert(norm, id);
            vocab.categories.push(name);
        }
        if vocab.categories.is_empty() {
            return Err(Error::Vocab("empty vocabulary".into()));
        }
        Ok(vocab)
    }

    /// Loads a vocabulary file: `id<TAB>name` lines followed by optional
    /// `alias<TAB>surface<TAB>canonical-name` lines. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Vocab(msg) => Error::Vocab(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses vocabulary file content. See [`CategoryVocabulary::load`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<(usize, String)> = Vec::new();
        let mut alias_rows: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [id, name] => {
                    let id: usize = id.trim().parse().map_err(|_| {
                        Error::Vocab(format!("line {}: bad category id {id:?}", lineno + 1))
                    })?;
                    names.push((id, name.trim().to_string()));
                }
                [tag, surface, canonical] if tag.trim() == "alias" => {
                    alias_rows.push((surface.trim().to_string(), canonical.trim().to_string()));
                }
                _ => {
                    return Err(Error::Vocab(format!(
                        "line {}: expected `id<TAB>name` or `alias<TAB>surface<TAB>canonical`",
                        lineno + 1
                    )));
                }
            }
        }
        names.sort_by_key(|(id, _)| *id);
        for (pos, (id, name)) in names.iter().enumerate() {
            if *id != pos {
                return Err(Error::Vocab(format!(
                    "category ids must be exactly 0..q-1; found id {id} for {name:?} at position {pos}"
                )));
            }
        }
        let mut vocab = Self::from_names(names.into_iter().map(|(_, name)| name))?;
        for (surface, canonical) in alias_rows {
            vocab.add_alias(&surface, &canonical)?;
        }
        Ok(vocab)
    }

    /// Registers `surface` as an alias of the category named `canonical`.
    pub fn add_alias(&mut self, surface: &str, canonical: &str) -> Result<()> {
        let canonical_norm = normalize_surface(canonical);
        let target = *self.norm_to_id.get(&canonical_norm).ok_or_else(|| {
            Error::Vocab(format!("alias {surface:?} targets unknown category {canonical:?}"))
        })?;
        let surface_norm = normalize_surface(surface);
        if surface_norm.is_empty() {
            return Err(Error::Vocab(format!("alias surface {surface:?} is empty")));
        }
        if let Some(&owner) = self.norm_to_id.get(&surface_norm) {
            if owner != target {
                return Err(Error::Vocab(format!(
                    "alias {surface:?} collides with canonical name of category {owner} ({:?})",
                    self.categories[owner]
                )));
            }
            return Ok(()); // alias of a name onto itself is a no-op
        }
        if let Some(&existing) = self.aliases.get(&surface_norm) {
            if existing != target {
                return Err(Error::Vocab(format!(
                    "alias {surface:?} already maps to category {existing} ({:?})",
                    self.categories[existing]
                )));
            }
            return Ok(());
        }
        self.aliases.insert(surface_norm, target);
        Ok(())
    }

    /// Number of categories, `q`.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Canonical name of a category.
    pub fn name(&self, id: usize) -> &str {
        &self.categories[id]
    }

    pub fn names(&self) -> &[String] {
        &self.categories
    }

    /// Id of an exactly-matching canonical name, without alias or plural
    /// fallback.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.norm_to_id.get(&normalize_surface(name)).copied()
    }

    /// Resolves a raw surface form to a category id.
    ///
    /// Normalization trims, case-folds, strips trailing punctuation, and
    /// collapses internal whitespace. Matching order: canonical names,
    /// aliases, then a singular/plural fallback that strips one trailing
    /// `s` or appends one. Returns `None` when nothing matches; absence is
    /// a valid outcome, not an error.
    pub fn normalize_label(&self, raw: &str) -> Option<usize> {
        let norm = normalize_surface(raw);
        if norm.is_empty() {
            return None;
        }
        if let Some(id) = self.lookup(&norm) {
            return Some(id);
        }
        if let Some(stripped) = norm.strip_suffix('s') {
            if !stripped.is_empty() {
                if let Some(id) = self.lookup(stripped) {
                    return Some(id);
                }
            }
        }
        self.lookup(&format!("{norm}s"))
    }

    fn lookup(&self, norm: &str) -> Option<usize> {
        self.norm_to_id
            .get(norm)
            .or_else(|| self.aliases.get(norm))
            .copied()
    }

    /// All registered aliases as (surface, category id) pairs.
    pub fn aliases(&self) -> impl Iterator<Item = (&str, usize)> {
        self.aliases.iter().map(|(s, &id)| (s.as_str(), id))
    }
}

/// Canonicalizes a surface form: trim, case-fold, strip trailing
/// punctuation, collapse internal whitespace.
pub fn normalize_surface(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| c.is_ascii_punctuation());
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Dense binary label assignment over a vocabulary of `q` categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn empty(q: usize) -> Self {
        LabelVector { bits: vec![false; q] }
    }

    /// Sets exactly the bits named by `ids`. Fails on any id >= q.
    pub fn from_ids<I: IntoIterator<Item = usize>>(ids: I, q: usize) -> Result<Self> {
        let mut v = Self::empty(q);
        for id in ids {
            if id >= q {
                return Err(Error::Vocab(format!(
                    "label id {id} out of range for vocabulary of size {q}"
                )));
            }
            v.bits[id] = true;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn set(&mut self, k: usize, value: bool) {
        self.bits[k] = value;
    }

    /// Ids of set bits, ascending.
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
    }

    pub fn count_positives(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One dataset image: an identifier, a path or URL, and optionally the
/// ground-truth labels (required by the simulated backend and by eval).
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_ref: String,
    pub ground_truth: Option<LabelVector>,
}

#[derive(Deserialize)]
struct ManifestLine {
    image_id: String,
    image_ref: String,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

/// Loads a JSONL dataset manifest: one object per line with `image_id`,
/// `image_ref`, and optional `labels` (category names resolved against the
/// vocabulary).
pub fn load_manifest(path: &Path, vocab: &CategoryVocabulary) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_inner(&text, vocab, path)
}

/// Parses manifest content. See [`load_manifest`].
pub fn parse_manifest(text: &str, vocab: &CategoryVocabulary) -> Result<Vec<ImageRecord>> {
    parse_manifest_inner(text, vocab, Path::new("<manifest>"))
}

fn parse_manifest_inner(
    text: &str,
    vocab: &CategoryVocabulary,
    path: &Path,
) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        if let Some(prev) = seen.insert(parsed.image_id.clone(), lineno + 1) {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("duplicate image_id {:?} (first seen on line {prev})", parsed.image_id),
            ));
        }
        let ground_truth = match parsed.labels {
            None => None,
            Some(names) => {
                let mut ids = Vec::with_capacity(names.len());
                for name in &names {
                    let id = vocab.normalize_label(name).ok_or_else(|| {
                        Error::parse(
                            path,
                            lineno + 1,
                            format!("label {name:?} for image {:?} is not in the vocabulary", parsed.image_id),
                        )
                    })?;
                    ids.push(id);
                }
                Some(LabelVector::from_ids(ids, vocab.len())?)
            }
        };
        records.push(ImageRecord {
            image_id: parsed.image_id,
            image_ref: parsed.image_ref,
            ground_truth,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> CategoryVocabulary {
        CategoryVocabulary::from_names(["person", "car", "dog", "refrigerator", "glove"]).unwrap()
    }

    #[test]
    fn single_category_file() {
        let v = CategoryVocabulary::parse("0\tperson\n").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.name(0), "person");
    }

    #[test]
    fn alias_row_resolves() {
        let v = CategoryVocabulary::parse("0\tperson\n1\trefrigerator\nalias\tfridge\trefrigerator\n")
            .unwrap();
        assert_eq!(v.normalize_label("fridge"), Some(1));
    }

    #[test]
    fn duplicate_category_is_fatal() {
        assert!(CategoryVocabulary::parse("0\tperson\n1\tPerson\n").is_err());
    }

    #[test]
    fn alias_to_unknown_category_is_fatal() {
        assert!(CategoryVocabulary::parse("0\tperson\nalias\tfridge\trefrigerator\n").is_err());
    }

    #[test]
    fn empty_vocabulary_is_fatal() {
        assert!(CategoryVocabulary::parse("").is_err());
        assert!(CategoryVocabulary::parse("# just a comment\n").is_err());
    }

    #[test]
    fn gapped_ids_are_fatal() {
        assert!(CategoryVocabulary::parse("0\tperson\n2\tcar\n").is_err());
    }

    #[test]
    fn alias_colliding_with_other_canonical_is_fatal() {
        let mut v = small_vocab();
        assert!(v.add_alias("car", "dog").is_err());
        // aliasing a name to itself is harmless
        assert!(v.add_alias("dog", "dog").is_ok());
    }

    #[test]
    fn plural_fallback() {
        let v = small_vocab();
        assert_eq!(v.normalize_label("Gloves"), Some(4));
        assert_eq!(v.normalize_label("glove"), Some(4));
    }

    #[test]
    fn out_of_vocabulary_is_none() {
        let v = small_vocab();
        assert_eq!(v.normalize_label("banner"), None);
        assert_eq!(v.normalize_label("van"), None);
        assert_eq!(v.normalize_label(""), None);
        assert_eq!(v.normalize_label("..."), None);
    }

    #[test]
    fn normalization_contract() {
        let v = small_vocab();
        assert_eq!(v.normalize_label(" person."), Some(0));
        assert_eq!(v.normalize_label("PERSON"), Some(0));
        assert_eq!(v.normalize_label("pers on"), None);
    }

    #[test]
    fn normalize_is_idempotent_on_canonical_names() {
        let v = small_vocab();
        for id in 0..v.len() {
            assert_eq!(v.normalize_label(v.name(id)), Some(id));
        }
    }

    #[test]
    fn collapses_internal_whitespace() {
        let v = CategoryVocabulary::from_names(["traffic light"]).unwrap();
        assert_eq!(v.normalize_label("traffic   light"), Some(0));
        assert_eq!(v.normalize_label("Traffic\tLight."), Some(0));
    }

    #[test]
    fn label_vector_from_ids() {
        let v = LabelVector::from_ids([0, 4], 5).unwrap();
        assert_eq!(
            (0..5).map(|k| v.get(k) as u8).collect::<Vec<_>>(),
            vec![1, 0, 0, 0, 1]
        );
        assert!(LabelVector::from_ids([5], 5).is_err());
        assert_eq!(LabelVector::from_ids([], 5).unwrap().count_positives(), 0);
        let all = LabelVector::from_ids(0..5, 5).unwrap();
        assert_eq!(all.count_positives(), 5);
    }

    #[test]
    fn label_vector_roundtrip() {
        let ids = vec![1, 3, 4];
        let v = LabelVector::from_ids(ids.clone(), 6).unwrap();
        assert_eq!(v.positives().collect::<Vec<_>>(), ids);
    }

    #[test]
    fn manifest_parsing() {
        let v = small_vocab();
        let text = r#"{"image_id": "a", "image_ref": "a.jpg", "labels": ["person", "Dogs"]}
{"image_id": "b", "image_ref": "b.jpg"}
"#;
        let records = parse_manifest(text, &v).unwrap();
        assert_eq!(records.len(), 2);
        let gt = records[0].ground_truth.as_ref().unwrap();
        assert_eq!(gt.positives().collect::<Vec<_>>(), vec![0, 2]);
        assert!(records[1].ground_truth.is_none());
    }

    #[test]
    fn manifest_rejects_duplicates_and_unknown_labels() {
        let v = small_vocab();
        let dup = "{\"image_id\": \"a\", \"image_ref\": \"x\"}\n{\"image_id\": \"a\", \"image_ref\": \"y\"}\n";
        assert!(parse_manifest(dup, &v).is_err());
        let unknown = "{\"image_id\": \"a\", \"image_ref\": \"x\", \"labels\": [\"banner\"]}\n";
        assert!(parse_manifest(unknown, &v).is_err());
    }
}

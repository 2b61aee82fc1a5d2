//! Deterministic simulated annotator.
//!
//! The simulator answers every query from the image's ground truth plus
//! per-class, per-format assertion rates: a true label is asserted with
//! probability `tpr`, a false one with probability `fpr`. Each decision
//! draws from a pure hash of (seed, image id, category, format), so
//! replies are independent of scheduling and repeatable byte for byte.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ChatResponse, ConceptStep, ModelBackend, QueryKind};
use crate::error::{BackendError, Error, Result};
use crate::hash::{stable_hash, unit_interval};
use crate::prompt::RenderedPrompt;
use crate::vocab::{CategoryVocabulary, ImageRecord};

/// Assertion rates for one class under one prompt format.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatePair {
    /// Probability of asserting a label that is true.
    pub tpr: f64,
    /// Probability of asserting a label that is false.
    pub fpr: f64,
}

impl RatePair {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tpr", self.tpr), ("fpr", self.fpr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-class rates for the binary and multi-option formats, plus the seed
/// all draws derive from. Open-ended queries reuse the multi-option rates.
#[derive(Debug, Clone)]
pub struct SimProfile {
    pub binary: Vec<RatePair>,
    pub multi_option: Vec<RatePair>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateSpec {
    Uniform(RatePair),
    PerClass(Vec<RatePair>),
}

#[derive(Serialize, Deserialize)]
struct ProfileWire {
    #[serde(default)]
    seed: u64,
    binary: RateSpec,
    multi_option: RateSpec,
}

impl SimProfile {
    /// Perfect annotator: every reply reproduces ground truth.
    pub fn oracle(q: usize) -> Self {
        Self::uniform(q, RatePair { tpr: 1.0, fpr: 0.0 }, RatePair { tpr: 1.0, fpr: 0.0 }, 0)
    }

    /// Same rates for every class.
    pub fn uniform(q: usize, binary: RatePair, multi_option: RatePair, seed: u64) -> Self {
        SimProfile {
            binary: vec![binary; q],
            multi_option: vec![multi_option; q],
            seed,
        }
    }

    /// Loads `{"seed": .., "binary": {..}|[..], "multi_option": {..}|[..]}`;
    /// a single rate pair applies uniformly, an array gives per-class rates.
    pub fn load(path: &Path, q: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, q)
    }

    pub fn from_json(text: &str, q: usize) -> Result<Self> {
        let wire: ProfileWire = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad sim profile: {e}")))?;
        let expand = |spec: RateSpec| -> Result<Vec<RatePair>> {
            match spec {
                RateSpec::Uniform(pair) => Ok(vec![pair; q]),
                RateSpec::PerClass(pairs) => {
                    if pairs.len() != q {
                        return Err(Error::Config(format!(
                            "profile lists {} classes but the vocabulary has {q}",
                            pairs.len()
                        )));
                    }
                    Ok(pairs)
                }
            }
        };
        let profile = SimProfile {
            binary: expand(wire.binary)?,
            multi_option: expand(wire.multi_option)?,
            seed: wire.seed,
        };
        profile.validate(q)?;
        Ok(profile)
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.binary.len() != q || self.multi_option.len() != q {
            return Err(Error::Config(format!(
                "profile covers {}/{} classes, vocabulary has {q}",
                self.binary.len(),
                self.multi_option.len()
            )));
        }
        for pair in self.binary.iter().chain(&self.multi_option) {
            pair.validate()?;
        }
        Ok(())
    }
}

/// Format tags keep the per-format hash streams independent.
const TAG_BINARY: &[u8] = b"bin";
const TAG_MULTI: &[u8] = b"mop";

pub struct SimBackend {
    profile: SimProfile,
    vocab: Arc<CategoryVocabulary>,
}

impl SimBackend {
    pub fn new(profile: SimProfile, vocab: Arc<CategoryVocabulary>) -> Result<Self> {
        profile.validate(vocab.len())?;
        Ok(SimBackend { profile, vocab })
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    /// Whether the simulator asserts `category` for this image under the
    /// given format tag.
    fn asserts(
        &self,
        image: &ImageRecord,
        category: usize,
        tag: &[u8],
    ) -> std::result::Result<bool, BackendError> {
        let truth = image
            .ground_truth
            .as_ref()
            .ok_or_else(|| BackendError::MissingGroundTruth {
                image_id: image.image_id.clone(),
            })?;
        let rates = match tag {
            t if t == TAG_BINARY => &self.profile.binary,
            _ => &self.profile.multi_option,
        };
        let pair = rates
            .get(category)
            .ok_or(BackendError::ProfileMismatch { category })?;
        let p = if truth.get(category) { pair.tpr } else { pair.fpr };
        let draw = unit_interval(stable_hash(&[
            &self.profile.seed.to_le_bytes(),
            image.image_id.as_bytes(),
            &(category as u64).to_le_bytes(),
            tag,
        ]));
        Ok(draw < p)
    }

    /// Answers a query from ground truth and the profile. Annotation
    /// queries need an image with ground truth; partition and concept
    /// queries are text-only.
    pub fn simulate(
        &self,
        image: Option<&ImageRecord>,
        kind: &QueryKind,
    ) -> std::result::Result<ChatResponse, BackendError> {
        let need_image = || {
            image.ok_or_else(|| BackendError::Unsupported("annotation query without an image".into()))
        };
        let text = match kind {
            QueryKind::Binary { category } => {
                if self.asserts(need_image()?, *category, TAG_BINARY)? {
                    "Yes".to_string()
                } else {
                    "No".to_string()
                }
            }
            QueryKind::MultiOption { categories } => {
                let image = need_image()?;
                let mut asserted = Vec::new();
                for &k in categories {
                    if self.asserts(image, k, TAG_MULTI)? {
                        asserted.push(self.vocab.name(k));
                    }
                }
                if asserted.is_empty() {
                    "NO".to_string()
                } else {
                    asserted.join(", ")
                }
            }
            QueryKind::OpenEnded => {
                let image = need_image()?;
                let mut asserted = Vec::new();
                for k in 0..self.vocab.len() {
                    if self.asserts(image, k, TAG_MULTI)? {
                        asserted.push(self.vocab.name(k));
                    }
                }
                asserted.join(", ")
            }
            QueryKind::Partition { m } => {
                let m = (*m).clamp(1, self.vocab.len());
                let mut lines = Vec::with_capacity(m);
                for g in 0..m {
                    let members: Vec<&str> = (0..self.vocab.len())
                        .filter(|id| id % m == g)
                        .map(|id| self.vocab.name(id))
                        .collect();
                    lines.push(format!("Group {}: {}", g + 1, members.join(", ")));
                }
                lines.join("\n")
            }
            QueryKind::Concept { step, category } => {
                let name = self.vocab.name(*category);
                match step {
                    ConceptStep::SuperCategory => format!("{name} is a type of object."),
                    ConceptStep::Similar => "none".to_string(),
                    ConceptStep::Ambiguity => "No.".to_string(),
                }
            }
        };
        Ok(ChatResponse {
            text,
            latency_ms: 0,
            attempt: 1,
        })
    }
}

impl ModelBackend for SimBackend {
    fn query(
        &self,
        image: Option<&ImageRecord>,
        _prompt: &RenderedPrompt,
        kind: &QueryKind,
    ) -> std::result::Result<ChatResponse, BackendError> {
        self.simulate(image, kind)
    }
}

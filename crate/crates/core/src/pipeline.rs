//! The two-stage annotation pipeline and its single-stage baselines.
//!
//! Stage 1 sends one multi-option query per partition group and unions
//! the accepted categories into a candidate set. Stage 2 verifies each
//! candidate with a disambiguated yes/no query; positives form the final
//! label vector, so final labels are always a subset of the candidates.
//! Batch runs append one record per image to the output file as they
//! complete, skip already-present images on restart, and finalize by
//! rewriting the file in manifest order so results are schedule
//! independent.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, QueryKind};
use crate::concepts::ConceptCache;
use crate::error::{Error, Result};
use crate::hash::hex_digest;
use crate::partition::PartitionPlan;
use crate::prompt::{PromptStyle, PromptTemplates};
use crate::vocab::{CategoryVocabulary, ImageRecord, LabelVector};

/// Verdict of a yes/no reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryAnswer {
    Positive,
    Negative,
    Unparseable,
}

/// Classifies a yes/no reply by its first token after normalization.
/// Anything that does not open with "yes" or "no" is unparseable, which
/// is a value, not an error.
pub fn parse_binary_answer(text: &str) -> BinaryAnswer {
    let norm = crate::vocab::normalize_surface(text);
    let first = norm
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| c.is_ascii_punctuation());
    match first {
        "yes" => BinaryAnswer::Positive,
        "no" => BinaryAnswer::Negative,
        _ => BinaryAnswer::Unparseable,
    }
}

/// Split of a multi-option reply: group members accepted, vocabulary
/// classes named outside the queried group (excluded, the template
/// forbids them), and tokens outside the vocabulary entirely.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MopAnswer {
    pub accepted: BTreeSet<usize>,
    pub oov: Vec<String>,
    pub out_of_group: Vec<usize>,
}

/// Parses a multi-option reply. A whole-reply "NO" (after normalization)
/// means no candidate is present; otherwise tokens are comma-separated
/// names resolved through the vocabulary.
pub fn parse_multi_option_answer(
    text: &str,
    group: &[usize],
    vocab: &CategoryVocabulary,
) -> MopAnswer {
    let mut answer = MopAnswer::default();
    if crate::vocab::normalize_surface(text) == "no" {
        return answer;
    }
    let members: HashSet<usize> = group.iter().copied().collect();
    for token in text.split([',', '\n']) {
        if crate::vocab::normalize_surface(token).is_empty() {
            continue;
        }
        match vocab.normalize_label(token) {
            Some(id) if members.contains(&id) => {
                answer.accepted.insert(id);
            }
            Some(id) => {
                if !answer.out_of_group.contains(&id) {
                    answer.out_of_group.push(id);
                }
            }
            None => answer.oov.push(token.trim().to_string()),
        }
    }
    answer
}

/// Stage-1 candidates for one image: category ids with the index of the
/// group that first proposed them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub image_id: String,
    entries: BTreeMap<usize, usize>,
}

impl CandidateSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        CandidateSet {
            image_id: image_id.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Union insert; a category proposed by several groups keeps the
    /// lowest group index.
    pub fn insert(&mut self, category: usize, group: usize) {
        self.entries
            .entry(category)
            .and_modify(|g| *g = (*g).min(group))
            .or_insert(group);
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    /// (category, source group) pairs in ascending category order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|(&c, &g)| (c, g))
    }

    pub fn contains(&self, category: usize) -> bool {
        self.entries.contains_key(&category)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub stage1_queries: u64,
    pub stage2_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub stage: u8,
    pub subject: String,
    pub prompt_hash: String,
    pub reply: String,
    pub outcome: String,
}

/// Final annotation for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Final labels; positives are always a subset of the candidates.
    pub labels: LabelVector,
    pub candidates: CandidateSet,
    pub counts: QueryCounts,
    /// Set when a backend failure or an unparseable-after-retry reply
    /// forced a default; degraded records are kept, never dropped.
    pub degraded: bool,
    pub query_log: Option<Vec<QueryLogEntry>>,
}

#[derive(Serialize, Deserialize)]
struct CandidateWire {
    name: String,
    group: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    image_id: String,
    labels: Vec<String>,
    candidates: Vec<CandidateWire>,
    counts: QueryCounts,
    degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_log: Option<Vec<QueryLogEntry>>,
}

impl AnnotationRecord {
    /// Serializes to one JSONL line with label and candidate names.
    pub fn to_json_line(&self, vocab: &CategoryVocabulary) -> String {
        let wire = RecordWire {
            image_id: self.image_id.clone(),
            labels: self
                .labels
                .positives()
                .map(|k| vocab.name(k).to_string())
                .collect(),
            candidates: self
                .candidates
                .entries()
                .map(|(c, g)| CandidateWire {
                    name: vocab.name(c).to_string(),
                    group: g,
                })
                .collect(),
            counts: self.counts,
            degraded: self.degraded,
            query_log: self.query_log.clone(),
        };
        serde_json::to_string(&wire).expect("record serialization cannot fail")
    }

    pub fn from_json_line(line: &str, vocab: &CategoryVocabulary) -> Result<Self> {
        let wire: RecordWire = serde_json::from_str(line)
            .map_err(|e| Error::Pipeline(format!("bad record line: {e}")))?;
        let mut labels = LabelVector::empty(vocab.len());
        for name in &wire.labels {
            let id = vocab
                .normalize_label(name)
                .ok_or_else(|| Error::Pipeline(format!("record label {name:?} not in vocabulary")))?;
            labels.set(id, true);
        }
        let mut candidates = CandidateSet::new(wire.image_id.clone());
        for cand in &wire.candidates {
            let id = vocab.normalize_label(&cand.name).ok_or_else(|| {
                Error::Pipeline(format!("record candidate {:?} not in vocabulary", cand.name))
            })?;
            candidates.insert(id, cand.group);
        }
        Ok(AnnotationRecord {
            image_id: wire.image_id,
            labels,
            candidates,
            counts: wire.counts,
            degraded: wire.degraded,
            query_log: wire.query_log,
        })
    }
}

/// Query totals for a finished run against the one-binary-query-per-class
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub images: u64,
    pub mean_stage1_queries: f64,
    pub mean_stage2_queries: f64,
    pub total_queries: u64,
    /// `n * q`: what asking one binary query per class would cost.
    pub baseline_queries: u64,
    pub reduction_factor: f64,
}

pub fn cost_report(records: &[AnnotationRecord], q: usize) -> CostReport {
    let n = records.len() as u64;
    let stage1: u64 = records.iter().map(|r| r.counts.stage1_queries).sum();
    let stage2: u64 = records.iter().map(|r| r.counts.stage2_queries).sum();
    let total = stage1 + stage2;
    let baseline = n * q as u64;
    CostReport {
        images: n,
        mean_stage1_queries: if n == 0 { 0.0 } else { stage1 as f64 / n as f64 },
        mean_stage2_queries: if n == 0 { 0.0 } else { stage2 as f64 / n as f64 },
        total_queries: total,
        baseline_queries: baseline,
        reduction_factor: if total == 0 {
            0.0
        } else {
            baseline as f64 / total as f64
        },
    }
}

/// Shared settings for a batch run.
#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    pub vocab: &'a Arc<CategoryVocabulary>,
    pub backend: &'a dyn ModelBackend,
    pub templates: &'a PromptTemplates,
    pub style: PromptStyle,
    pub parallelism: usize,
    /// Abort on the first backend error instead of degrading the record.
    pub fail_fast: bool,
    pub log_queries: bool,
    /// Replace category names with concept-card descriptions in stage-2
    /// prompts; plain binary prompts when off.
    pub use_cad: bool,
    /// Output JSONL; progress is appended per image and the file is
    /// rewritten in manifest order on success. `None` disables
    /// persistence (and resume).
    pub output: Option<&'a Path>,
}

/// Stage 1: one multi-option query per group, unioned with provenance.
pub fn generate_candidates(
    image: &ImageRecord,
    plan: &PartitionPlan,
    opts: &RunOptions,
) -> Result<(CandidateSet, StageOutcome)> {
    let vocab = opts.vocab;
    let mut candidates = CandidateSet::new(image.image_id.clone());
    let mut outcome = StageOutcome::default();
    for (g, group) in plan.groups().iter().enumerate() {
        let names: Vec<&str> = group.iter().map(|&k| vocab.name(k)).collect();
        let prompt = opts.templates.render_multi_option(opts.style, &names)?;
        let kind = QueryKind::MultiOption {
            categories: group.clone(),
        };
        outcome.queries += 1;
        match opts.backend.query(Some(image), &prompt, &kind) {
            Ok(reply) => {
                let parsed = parse_multi_option_answer(&reply.text, group, vocab);
                for &id in &parsed.accepted {
                    candidates.insert(id, g);
                }
                outcome.push_log(opts, || QueryLogEntry {
                    stage: 1,
                    subject: format!("group {g}"),
                    prompt_hash: hex_digest(&prompt.text),
                    reply: reply.text.clone(),
                    outcome: mop_outcome(&parsed, vocab),
                });
            }
            Err(e) if e.is_fatal() || opts.fail_fast => return Err(e.into()),
            Err(e) => {
                outcome.degraded = true;
                outcome.push_log(opts, || QueryLogEntry {
                    stage: 1,
                    subject: format!("group {g}"),
                    prompt_hash: hex_digest(&prompt.text),
                    reply: String::new(),
                    outcome: format!("backend error: {e}"),
                });
            }
        }
    }
    Ok((candidates, outcome))
}

fn mop_outcome(parsed: &MopAnswer, vocab: &CategoryVocabulary) -> String {
    let accepted: Vec<&str> = parsed.accepted.iter().map(|&k| vocab.name(k)).collect();
    let out_of_group: Vec<&str> = parsed.out_of_group.iter().map(|&k| vocab.name(k)).collect();
    format!(
        "accepted={accepted:?} oov={:?} out_of_group={out_of_group:?}",
        parsed.oov
    )
}

/// Per-stage bookkeeping shared by both stages.
#[derive(Default)]
pub struct StageOutcome {
    pub degraded: bool,
    pub queries: u64,
    pub log: Vec<QueryLogEntry>,
}

impl StageOutcome {
    fn push_log(&mut self, opts: &RunOptions, entry: impl FnOnce() -> QueryLogEntry) {
        if opts.log_queries {
            self.log.push(entry());
        }
    }
}

/// Stage 2: one yes/no verification per candidate. Positives are kept;
/// unparseable replies are retried once and then treated as negative.
pub fn refine_candidates(
    image: &ImageRecord,
    candidates: &CandidateSet,
    cards: &ConceptCache,
    opts: &RunOptions,
) -> Result<(LabelVector, StageOutcome)> {
    let vocab = opts.vocab;
    let mut labels = LabelVector::empty(vocab.len());
    let mut outcome = StageOutcome::default();
    for category in candidates.ids() {
        let prompt = if opts.use_cad {
            let card = cards.card_or_identity(category, vocab);
            opts.templates.render_cad_binary(&card, vocab)?
        } else {
            opts.templates.render_binary(opts.style, vocab.name(category))?
        };
        let kind = QueryKind::Binary { category };
        outcome.queries += 1;
        let mut verdict = None;
        for round in 0..2 {
            match opts.backend.query(Some(image), &prompt, &kind) {
                Ok(reply) => {
                    let parsed = parse_binary_answer(&reply.text);
                    let note = match (parsed, round) {
                        (BinaryAnswer::Unparseable, 0) => "unparseable, retrying",
                        (BinaryAnswer::Unparseable, _) => {
                            "unparseable after retry, treated as negative"
                        }
                        (BinaryAnswer::Positive, _) => "positive",
                        (BinaryAnswer::Negative, _) => "negative",
                    };
                    outcome.push_log(opts, || QueryLogEntry {
                        stage: 2,
                        subject: vocab.name(category).to_string(),
                        prompt_hash: hex_digest(&prompt.text),
                        reply: reply.text.clone(),
                        outcome: note.to_string(),
                    });
                    if parsed != BinaryAnswer::Unparseable {
                        verdict = Some(parsed);
                        break;
                    }
                }
                Err(e) if e.is_fatal() || opts.fail_fast => return Err(e.into()),
                Err(e) => {
                    outcome.degraded = true;
                    outcome.push_log(opts, || QueryLogEntry {
                        stage: 2,
                        subject: vocab.name(category).to_string(),
                        prompt_hash: hex_digest(&prompt.text),
                        reply: String::new(),
                        outcome: format!("backend error: {e}"),
                    });
                    verdict = Some(BinaryAnswer::Negative);
                    break;
                }
            }
        }
        match verdict {
            Some(BinaryAnswer::Positive) => labels.set(category, true),
            Some(_) => {}
            None => {
                // two unparseable replies
                outcome.degraded = true;
            }
        }
    }
    Ok((labels, outcome))
}

/// Runs the full two-stage pipeline over a manifest.
pub fn annotate_dataset(
    manifest: &[ImageRecord],
    plan: &PartitionPlan,
    cards: &ConceptCache,
    opts: &RunOptions,
) -> Result<(Vec<AnnotationRecord>, CostReport)> {
    if plan.total_categories() != opts.vocab.len() {
        return Err(Error::Pipeline(format!(
            "plan covers {} categories but the vocabulary has {}",
            plan.total_categories(),
            opts.vocab.len()
        )));
    }
    run_batch(manifest, opts, |image| {
        let (candidates, stage1) = generate_candidates(image, plan, opts)?;
        let (labels, stage2) = refine_candidates(image, &candidates, cards, opts)?;
        let mut log = stage1.log;
        log.extend(stage2.log);
        Ok(AnnotationRecord {
            image_id: image.image_id.clone(),
            labels,
            candidates,
            counts: QueryCounts {
                stage1_queries: stage1.queries,
                stage2_queries: stage2.queries,
            },
            degraded: stage1.degraded || stage2.degraded,
            query_log: opts.log_queries.then_some(log),
        })
    })
}

/// Single-stage baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingleStageMode {
    /// One plain binary query per vocabulary class.
    PureBp,
    /// Multi-option over the whole vocabulary, or per group when a plan
    /// is supplied.
    PureMop,
    /// One open-ended query; replies are matched against the vocabulary.
    OpenEnded,
}

pub fn run_single_stage(
    manifest: &[ImageRecord],
    mode: SingleStageMode,
    plan: Option<&PartitionPlan>,
    opts: &RunOptions,
) -> Result<(Vec<AnnotationRecord>, CostReport)> {
    let vocab = opts.vocab;
    let q = vocab.len();
    let all_ids: Vec<usize> = (0..q).collect();
    run_batch(manifest, opts, |image| {
        let mut candidates = CandidateSet::new(image.image_id.clone());
        let mut labels = LabelVector::empty(q);
        let mut counts = QueryCounts::default();
        let mut outcome = StageOutcome::default();
        match mode {
            SingleStageMode::PureBp => {
                let identity_cards = ConceptCache::new();
                let bp_opts = RunOptions {
                    use_cad: false,
                    ..*opts
                };
                let mut full = CandidateSet::new(image.image_id.clone());
                for k in 0..q {
                    full.insert(k, 0);
                }
                let (verified, stage) = refine_candidates(image, &full, &identity_cards, &bp_opts)?;
                for k in verified.positives() {
                    candidates.insert(k, 0);
                }
                labels = verified;
                counts.stage2_queries = stage.queries;
                outcome.degraded = stage.degraded;
                outcome.log = stage.log;
            }
            SingleStageMode::PureMop => {
                let groups: Vec<Vec<usize>> = match plan {
                    Some(p) => p.groups().to_vec(),
                    None => vec![all_ids.clone()],
                };
                for (g, group) in groups.iter().enumerate() {
                    let names: Vec<&str> = group.iter().map(|&k| vocab.name(k)).collect();
                    let prompt = opts.templates.render_multi_option(opts.style, &names)?;
                    let kind = QueryKind::MultiOption {
                        categories: group.clone(),
                    };
                    counts.stage1_queries += 1;
                    match opts.backend.query(Some(image), &prompt, &kind) {
                        Ok(reply) => {
                            let parsed = parse_multi_option_answer(&reply.text, group, vocab);
                            for &id in &parsed.accepted {
                                candidates.insert(id, g);
                                labels.set(id, true);
                            }
                            outcome.push_log(opts, || QueryLogEntry {
                                stage: 1,
                                subject: format!("group {g}"),
                                prompt_hash: hex_digest(&prompt.text),
                                reply: reply.text.clone(),
                                outcome: mop_outcome(&parsed, vocab),
                            });
                        }
                        Err(e) if e.is_fatal() || opts.fail_fast => return Err(e.into()),
                        Err(e) => {
                            outcome.degraded = true;
                            outcome.push_log(opts, || QueryLogEntry {
                                stage: 1,
                                subject: format!("group {g}"),
                                prompt_hash: hex_digest(&prompt.text),
                                reply: String::new(),
                                outcome: format!("backend error: {e}"),
                            });
                        }
                    }
                }
            }
            SingleStageMode::OpenEnded => {
                let prompt = opts.templates.render_open_ended();
                counts.stage1_queries = 1;
                match opts.backend.query(Some(image), &prompt, &QueryKind::OpenEnded) {
                    Ok(reply) => {
                        let parsed = parse_multi_option_answer(&reply.text, &all_ids, vocab);
                        for &id in &parsed.accepted {
                            candidates.insert(id, 0);
                            labels.set(id, true);
                        }
                        outcome.push_log(opts, || QueryLogEntry {
                            stage: 1,
                            subject: "open".to_string(),
                            prompt_hash: hex_digest(&prompt.text),
                            reply: reply.text.clone(),
                            outcome: mop_outcome(&parsed, vocab),
                        });
                    }
                    Err(e) if e.is_fatal() || opts.fail_fast => return Err(e.into()),
                    Err(e) => {
                        outcome.degraded = true;
                        outcome.push_log(opts, || QueryLogEntry {
                            stage: 1,
                            subject: "open".to_string(),
                            prompt_hash: hex_digest(&prompt.text),
                            reply: String::new(),
                            outcome: format!("backend error: {e}"),
                        });
                    }
                }
            }
        }
        Ok(AnnotationRecord {
            image_id: image.image_id.clone(),
            labels,
            candidates,
            counts,
            degraded: outcome.degraded,
            query_log: opts.log_queries.then_some(outcome.log),
        })
    })
}

/// Resume-aware, order-independent batch runner.
fn run_batch<F>(
    manifest: &[ImageRecord],
    opts: &RunOptions,
    per_image: F,
) -> Result<(Vec<AnnotationRecord>, CostReport)>
where
    F: Fn(&ImageRecord) -> Result<AnnotationRecord> + Sync,
{
    let vocab = opts.vocab;
    let index_of: HashMap<&str, usize> = manifest
        .iter()
        .enumerate()
        .map(|(i, rec)| (rec.image_id.as_str(), i))
        .collect();

    // resume: records already present in the output are not re-annotated
    let mut done: Vec<Option<AnnotationRecord>> = vec![None; manifest.len()];
    if let Some(path) = opts.output {
        if path.exists() {
            for record in read_progress(path, vocab)? {
                match index_of.get(record.image_id.as_str()) {
                    Some(&i) => done[i] = Some(record),
                    None => eprintln!(
                        "warning: dropping record for {:?}: not in the manifest",
                        record.image_id
                    ),
                }
            }
        }
    }

    let pending: Vec<usize> = (0..manifest.len()).filter(|&i| done[i].is_none()).collect();
    let writer = match opts.output {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(Mutex::new(file))
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let finished: Mutex<Vec<(usize, AnnotationRecord)>> = Mutex::new(Vec::new());
    let workers = opts.parallelism.max(1).min(pending.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= pending.len() {
                    break;
                }
                let manifest_index = pending[slot];
                match per_image(&manifest[manifest_index]) {
                    Ok(record) => {
                        if let Some(writer) = &writer {
                            use std::io::Write;
                            let line = record.to_json_line(vocab);
                            let mut file = writer.lock().expect("writer poisoned");
                            if let Err(e) = writeln!(file, "{line}").and_then(|()| file.flush()) {
                                let mut failure = failure.lock().expect("failure slot poisoned");
                                failure.get_or_insert(Error::io(opts.output.unwrap(), e));
                                stop.store(true, Ordering::SeqCst);
                                break;
                            }
                        }
                        finished
                            .lock()
                            .expect("results poisoned")
                            .push((manifest_index, record));
                    }
                    Err(e) => {
                        failure.lock().expect("failure slot poisoned").get_or_insert(e);
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().expect("failure slot poisoned") {
        return Err(e); // progress written so far stays on disk for resume
    }
    for (i, record) in finished.into_inner().expect("results poisoned") {
        done[i] = Some(record);
    }
    let records: Vec<AnnotationRecord> = done
        .into_iter()
        .map(|r| r.expect("every manifest image was annotated"))
        .collect();

    let report = cost_report(&records, vocab.len());
    if let Some(path) = opts.output {
        drop(writer);
        let mut text = String::new();
        for record in &records {
            text.push_str(&record.to_json_line(vocab));
            text.push('\n');
        }
        atomic_write(path, &text)?;
        let cost_path = cost_report_path(path);
        let cost_json =
            serde_json::to_string_pretty(&report).expect("cost serialization cannot fail");
        atomic_write(&cost_path, &cost_json)?;
    }
    Ok((records, report))
}

/// Sibling path for the cost summary: `annotations.jsonl` ->
/// `annotations.cost.json`.
pub fn cost_report_path(output: &Path) -> PathBuf {
    output.with_extension("cost.json")
}

/// Reads progress records from a previous run. A torn final line without
/// a trailing newline (interrupted write) is dropped; any other parse
/// failure is fatal.
fn read_progress(path: &Path, vocab: &CategoryVocabulary) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ends_clean = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match AnnotationRecord::from_json_line(line, vocab) {
            Ok(r) => records.push(r),
            Err(e) if i + 1 == lines.len() && !ends_clean => {
                eprintln!("warning: dropping torn final line of {}: {e}", path.display());
            }
            Err(e) => return Err(Error::parse(path, i + 1, e.to_string())),
        }
    }
    Ok(records)
}

fn atomic_write(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RatePair, SimBackend, SimProfile};
    use crate::partition::partition_random;
    use crate::vocab::LabelVector;

    fn vocab() -> Arc<CategoryVocabulary> {
        Arc::new(
            CategoryVocabulary::from_names([
                "person",
                "car",
                "dog",
                "cat",
                "bus",
                "truck",
                "traffic light",
                "banana",
            ])
            .unwrap(),
        )
    }

    fn image(id: &str, positives: &[usize], q: usize) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            image_ref: format!("{id}.jpg"),
            ground_truth: Some(LabelVector::from_ids(positives.iter().copied(), q).unwrap()),
        }
    }

    #[test]
    fn binary_answer_parsing() {
        assert_eq!(parse_binary_answer("Yes"), BinaryAnswer::Positive);
        assert_eq!(parse_binary_answer("no."), BinaryAnswer::Negative);
        assert_eq!(parse_binary_answer("  YES, it does"), BinaryAnswer::Positive);
        assert_eq!(parse_binary_answer("It contains a dog"), BinaryAnswer::Unparseable);
        assert_eq!(parse_binary_answer("noise"), BinaryAnswer::Unparseable);
        assert_eq!(parse_binary_answer(""), BinaryAnswer::Unparseable);
    }

    #[test]
    fn multi_option_answer_parsing() {
        let v = vocab();
        let group = vec![0, 1, 6];
        let full = parse_multi_option_answer("person, car, traffic light", &group, &v);
        assert_eq!(full.accepted.iter().copied().collect::<Vec<_>>(), vec![0, 1, 6]);
        assert!(full.oov.is_empty() && full.out_of_group.is_empty());

        let no = parse_multi_option_answer("NO", &group, &v);
        assert!(no.accepted.is_empty());
        let no = parse_multi_option_answer("no.", &group, &v);
        assert!(no.accepted.is_empty());

        let mixed = parse_multi_option_answer("person, banner", &group, &v);
        assert_eq!(mixed.accepted.iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(mixed.oov, vec!["banner"]);

        // dog is in the vocabulary but not in the queried group
        let oog = parse_multi_option_answer("person, dog", &group, &v);
        assert_eq!(oog.accepted.iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(oog.out_of_group, vec![2]);
    }

    #[test]
    fn candidate_merge_keeps_lowest_group() {
        let mut a = CandidateSet::new("i");
        a.insert(3, 2);
        a.insert(3, 0);
        a.insert(3, 1);
        assert_eq!(a.entries().collect::<Vec<_>>(), vec![(3, 0)]);

        let mut b = CandidateSet::new("i");
        b.insert(3, 0);
        b.insert(3, 2);
        b.insert(3, 1);
        assert_eq!(a, b);
    }

    fn oracle_opts<'a>(
        vocab: &'a Arc<CategoryVocabulary>,
        backend: &'a dyn crate::backend::ModelBackend,
        templates: &'a PromptTemplates,
    ) -> RunOptions<'a> {
        RunOptions {
            vocab,
            backend,
            templates,
            style: PromptStyle::CarefullyDesigned,
            parallelism: 1,
            fail_fast: false,
            log_queries: false,
            use_cad: true,
            output: None,
        }
    }

    #[test]
    fn oracle_candidates_match_ground_truth() {
        let v = vocab();
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let plan = partition_random(v.len(), 2, 3).unwrap();
        let img = image("i0", &[0, 4, 7], v.len());
        let (candidates, stage) = generate_candidates(&img, &plan, &opts).unwrap();
        assert_eq!(candidates.ids().collect::<Vec<_>>(), vec![0, 4, 7]);
        assert_eq!(stage.queries, 2);
        assert!(!stage.degraded);
    }

    #[test]
    fn refine_drops_negatives() {
        let v = vocab();
        // binary oracle, so verification equals ground truth
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        // image has truck but not bus; candidates over-propose bus
        let img = image("i0", &[5], v.len());
        let mut candidates = CandidateSet::new("i0");
        candidates.insert(4, 0); // bus
        candidates.insert(5, 0); // truck
        let cards = ConceptCache::new();
        let (labels, stage) = refine_candidates(&img, &candidates, &cards, &opts).unwrap();
        assert_eq!(labels.positives().collect::<Vec<_>>(), vec![5]);
        assert_eq!(stage.queries, 2);
    }

    #[test]
    fn empty_candidates_need_zero_queries() {
        let v = vocab();
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let img = image("i0", &[], v.len());
        let candidates = CandidateSet::new("i0");
        let cards = ConceptCache::new();
        let (labels, stage) = refine_candidates(&img, &candidates, &cards, &opts).unwrap();
        assert_eq!(labels.count_positives(), 0);
        assert_eq!(stage.queries, 0);
    }

    #[test]
    fn oracle_pipeline_reproduces_ground_truth() {
        let v = vocab();
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let plan = partition_random(v.len(), 4, 9).unwrap();
        let manifest: Vec<ImageRecord> = (0..40)
            .map(|i| image(&format!("img-{i}"), &[i % 8, (i * 3) % 8], v.len()))
            .collect();
        let cards = ConceptCache::new();
        let (records, cost) = annotate_dataset(&manifest, &plan, &cards, &opts).unwrap();
        for (record, img) in records.iter().zip(&manifest) {
            assert_eq!(&record.labels, img.ground_truth.as_ref().unwrap());
            assert_eq!(record.counts.stage1_queries, 4);
            assert_eq!(record.counts.stage2_queries, record.candidates.len() as u64);
            let finals: Vec<usize> = record.labels.positives().collect();
            assert!(finals.iter().all(|&k| record.candidates.contains(k)));
        }
        assert_eq!(cost.images, 40);
        assert_eq!(cost.baseline_queries, 40 * 8);
    }

    #[test]
    fn empty_manifest_yields_zero_report() {
        let v = vocab();
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let plan = partition_random(v.len(), 2, 0).unwrap();
        let cards = ConceptCache::new();
        let (records, cost) = annotate_dataset(&[], &plan, &cards, &opts).unwrap();
        assert!(records.is_empty());
        assert_eq!(cost.total_queries, 0);
        assert_eq!(cost.reduction_factor, 0.0);
    }

    #[test]
    fn single_stage_counts() {
        let v = vocab();
        let q = v.len();
        let sim = SimBackend::new(SimProfile::oracle(q), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let manifest = vec![image("a", &[0, 2], q)];

        let (bp, _) = run_single_stage(&manifest, SingleStageMode::PureBp, None, &opts).unwrap();
        assert_eq!(bp[0].counts.stage2_queries, q as u64);
        assert_eq!(bp[0].counts.stage1_queries, 0);
        assert_eq!(bp[0].labels, *manifest[0].ground_truth.as_ref().unwrap());

        let (mop, _) = run_single_stage(&manifest, SingleStageMode::PureMop, None, &opts).unwrap();
        assert_eq!(mop[0].counts.stage1_queries, 1);
        assert_eq!(mop[0].counts.stage2_queries, 0);

        let (open, _) =
            run_single_stage(&manifest, SingleStageMode::OpenEnded, None, &opts).unwrap();
        assert_eq!(open[0].counts.stage1_queries, 1);
        assert_eq!(open[0].labels, *manifest[0].ground_truth.as_ref().unwrap());
    }

    #[test]
    fn record_line_roundtrip() {
        let v = vocab();
        let mut candidates = CandidateSet::new("img-1");
        candidates.insert(0, 0);
        candidates.insert(6, 1);
        let record = AnnotationRecord {
            image_id: "img-1".into(),
            labels: LabelVector::from_ids([0], v.len()).unwrap(),
            candidates,
            counts: QueryCounts {
                stage1_queries: 2,
                stage2_queries: 2,
            },
            degraded: false,
            query_log: None,
        };
        let line = record.to_json_line(&v);
        let parsed = AnnotationRecord::from_json_line(&line, &v).unwrap();
        assert_eq!(parsed, record);
        // wire format carries names, not ids
        assert!(line.contains("\"traffic light\""));
    }

    #[test]
    fn all_no_replies_yield_empty_candidates() {
        let v = vocab();
        let zeros = SimProfile::uniform(
            v.len(),
            RatePair { tpr: 0.0, fpr: 0.0 },
            RatePair { tpr: 0.0, fpr: 0.0 },
            0,
        );
        let sim = SimBackend::new(zeros, Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let opts = oracle_opts(&v, &sim, &templates);
        let plan = partition_random(v.len(), 2, 3).unwrap();
        let img = image("i0", &[0, 1], v.len());
        let (candidates, stage) = generate_candidates(&img, &plan, &opts).unwrap();
        assert!(candidates.is_empty());
        assert_eq!(stage.queries, 2);
    }

    /// Replies scripted per (category, round); anything not scripted is
    /// unparseable.
    struct ScriptedBinary {
        replies: Mutex<HashMap<(usize, u32), &'static str>>,
        rounds: Mutex<HashMap<usize, u32>>,
    }

    impl ScriptedBinary {
        fn new(replies: &[((usize, u32), &'static str)]) -> Self {
            ScriptedBinary {
                replies: Mutex::new(replies.iter().copied().collect()),
                rounds: Mutex::new(HashMap::new()),
            }
        }
    }

    impl crate::backend::ModelBackend for ScriptedBinary {
        fn query(
            &self,
            _image: Option<&ImageRecord>,
            _prompt: &crate::prompt::RenderedPrompt,
            kind: &QueryKind,
        ) -> std::result::Result<crate::backend::ChatResponse, crate::error::BackendError> {
            let QueryKind::Binary { category } = kind else {
                panic!("stage 2 only issues binary queries");
            };
            let mut rounds = self.rounds.lock().unwrap();
            let round = rounds.entry(*category).or_insert(0);
            let text = self
                .replies
                .lock()
                .unwrap()
                .get(&(*category, *round))
                .copied()
                .unwrap_or("hard to say")
                .to_string();
            *round += 1;
            Ok(crate::backend::ChatResponse { text, latency_ms: 0, attempt: 1 })
        }
    }

    #[test]
    fn unparseable_replies_retry_once_then_default_negative() {
        let v = vocab();
        // category 0: garbage then Yes (retry succeeds, stays clean);
        // category 1: garbage twice (negative, degraded)
        let backend = ScriptedBinary::new(&[((0, 1), "Yes")]);
        let templates = PromptTemplates::default();
        let opts = RunOptions {
            log_queries: true,
            ..oracle_opts(&v, &backend, &templates)
        };
        let img = image("i0", &[0, 1], v.len());
        let mut candidates = CandidateSet::new("i0");
        candidates.insert(0, 0);
        candidates.insert(1, 0);
        let cards = ConceptCache::new();
        let (labels, stage) = refine_candidates(&img, &candidates, &cards, &opts).unwrap();
        assert_eq!(labels.positives().collect::<Vec<_>>(), vec![0]);
        assert!(stage.degraded);
        // retries are visible in the log but not in the query count
        assert_eq!(stage.queries, 2);
        assert_eq!(stage.log.len(), 4);
        assert_eq!(stage.log[0].outcome, "unparseable, retrying");
        assert_eq!(stage.log[1].outcome, "positive");
        assert_eq!(stage.log[3].outcome, "unparseable after retry, treated as negative");
    }

    #[test]
    fn query_log_records_subjects_and_outcomes() {
        let v = vocab();
        let sim = SimBackend::new(SimProfile::oracle(v.len()), Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let mut opts = oracle_opts(&v, &sim, &templates);
        opts.log_queries = true;
        let plan = partition_random(v.len(), 2, 3).unwrap();
        let cards = ConceptCache::new();
        let manifest = vec![image("i0", &[0, 5], v.len())];
        let (records, _) = annotate_dataset(&manifest, &plan, &cards, &opts).unwrap();
        let log = records[0].query_log.as_ref().unwrap();
        assert_eq!(log.len(), 2 + 2); // two groups, two candidates
        assert!(log.iter().take(2).all(|e| e.stage == 1));
        assert!(log.iter().skip(2).all(|e| e.stage == 2));
        for entry in log {
            assert_eq!(entry.prompt_hash.len(), 16);
            assert!(!entry.outcome.is_empty());
        }
        // the record line round-trips with its log attached
        let line = records[0].to_json_line(&v);
        assert!(line.contains("query_log"));
        assert_eq!(AnnotationRecord::from_json_line(&line, &v).unwrap(), records[0]);
    }

    #[test]
    fn noisy_run_is_schedule_independent() {
        let v = vocab();
        let q = v.len();
        let profile = SimProfile::uniform(
            q,
            RatePair { tpr: 0.9, fpr: 0.05 },
            RatePair { tpr: 0.9, fpr: 0.2 },
            77,
        );
        let sim = SimBackend::new(profile, Arc::clone(&v)).unwrap();
        let templates = PromptTemplates::default();
        let plan = partition_random(q, 2, 1).unwrap();
        let cards = ConceptCache::new();
        let manifest: Vec<ImageRecord> = (0..30)
            .map(|i| image(&format!("img-{i}"), &[i % q], q))
            .collect();
        let mut outputs = Vec::new();
        for parallelism in [1, 4] {
            let opts = RunOptions {
                parallelism,
                ..oracle_opts(&v, &sim, &templates)
            };
            let (records, _) = annotate_dataset(&manifest, &plan, &cards, &opts).unwrap();
            outputs.push(
                records
                    .iter()
                    .map(|r| r.to_json_line(&v))
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(outputs[0], outputs[1]);
    }
}

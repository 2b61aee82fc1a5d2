//! Label-space partitioning for divide-and-conquer prompting.
//!
//! Three strategies produce a disjoint cover of the vocabulary: random
//! round-robin (RandP), and greedy co-occurrence grouping that either
//! maximizes (CooP) or minimizes (DiscP) within-group affinity. A fourth
//! path parses and repairs partitions proposed by a model in free text.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::CategoryVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionStrategy {
    RandP,
    CooP,
    DiscP,
}

/// Whether grouping should favor classes that appear together (`Co`) or
/// classes that rarely do (`Disco`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Co,
    Disco,
}

/// A disjoint cover of category ids 0..q-1 by `m` non-empty groups.
/// Group members are kept sorted so serialized plans are canonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    strategy: PartitionStrategy,
    groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PlanWire {
    strategy: PartitionStrategy,
    groups: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Builds a plan after checking the disjoint-cover invariants against a
    /// vocabulary of size `q`. Group members are sorted.
    pub fn new(strategy: PartitionStrategy, groups: Vec<Vec<usize>>, q: usize) -> Result<Self> {
        let mut plan = PartitionPlan { strategy, groups };
        for group in &mut plan.groups {
            group.sort_unstable();
        }
        let report = validate_partition(&plan, q);
        if !report.is_valid() {
            return Err(Error::Partition(report.to_string()));
        }
        Ok(plan)
    }

    pub fn strategy(&self) -> PartitionStrategy {
        self.strategy
    }

    /// Number of groups, `m`.
    pub fn m(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Total number of categories covered.
    pub fn total_categories(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PlanWire {
            strategy: self.strategy,
            groups: self.groups.clone(),
        })
        .expect("plan serialization cannot fail")
    }

    /// Parses a plan file without cover validation; callers must run
    /// [`validate_partition`] against their vocabulary before use.
    pub fn from_json(text: &str) -> Result<Self> {
        let wire: PlanWire =
            serde_json::from_str(text).map_err(|e| Error::Partition(format!("bad plan JSON: {e}")))?;
        let mut groups = wire.groups;
        for group in &mut groups {
            group.sort_unstable();
        }
        Ok(PartitionPlan {
            strategy: wire.strategy,
            groups,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Default group count targeting roughly ten categories per group.
pub fn default_group_count(q: usize) -> usize {
    q.div_ceil(10).max(1)
}

/// Seeded random partition: shuffle 0..q-1, deal round-robin into `m`
/// groups. Deterministic per seed; group sizes differ by at most one.
pub fn partition_random(q: usize, m: usize, seed: u64) -> Result<PartitionPlan> {
    check_group_count(q, m)?;
    let mut ids: Vec<usize> = (0..q).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut groups = vec![Vec::with_capacity(q.div_ceil(m)); m];
    for (i, id) in ids.into_iter().enumerate() {
        groups[i % m].push(id);
    }
    PartitionPlan::new(PartitionStrategy::RandP, groups, q)
}

fn check_group_count(q: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Partition("group count m must be at least 1".into()));
    }
    if m > q {
        return Err(Error::Partition(format!(
            "group count m={m} exceeds category count q={q}"
        )));
    }
    Ok(())
}

/// Symmetric q x q co-occurrence counts; the diagonal holds per-class
/// positive counts.
#[derive(Debug, Clone)]
pub struct CooccurrenceMatrix {
    counts: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    names: Vec<String>,
    counts: Vec<Vec<f64>>,
}

impl CooccurrenceMatrix {
    pub fn new(counts: Vec<Vec<f64>>) -> Result<Self> {
        let q = counts.len();
        if q == 0 {
            return Err(Error::Partition("empty co-occurrence matrix".into()));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != q {
                return Err(Error::Partition(format!(
                    "row {i} has {} entries, expected {q}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Partition(format!(
                        "counts[{i}][{j}] = {v} is not a nonnegative finite number"
                    )));
                }
            }
        }
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        for i in 0..q {
            for j in (i + 1)..q {
                if !tol(counts[i][j], counts[j][i]) {
                    return Err(Error::Partition(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        counts[i][j], counts[j][i]
                    )));
                }
                let cap = counts[i][i].min(counts[j][j]);
                if counts[i][j] > cap + 1e-9 * cap.max(1.0) {
                    return Err(Error::Partition(format!(
                        "counts[{i}][{j}] = {} exceeds min of diagonals {cap}",
                        counts[i][j]
                    )));
                }
            }
        }
        Ok(CooccurrenceMatrix { counts })
    }

    /// Loads `{"names": [...], "counts": [[...]]}` and reorders rows and
    /// columns into vocabulary id order. The names must cover the
    /// vocabulary exactly.
    pub fn load(path: &Path, vocab: &CategoryVocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }

    pub fn from_json(text: &str, vocab: &CategoryVocabulary) -> Result<Self> {
        let wire: MatrixWire = serde_json::from_str(text)
            .map_err(|e| Error::Partition(format!("bad matrix JSON: {e}")))?;
        let q = vocab.len();
        if wire.names.len() != q {
            return Err(Error::Partition(format!(
                "matrix has {} names but the vocabulary has {q} categories",
                wire.names.len()
            )));
        }
        let mut to_vocab = vec![usize::MAX; q]; // matrix row -> vocab id
        let mut seen = vec![false; q];
        for (row, name) in wire.names.iter().enumerate() {
            let id = vocab
                .normalize_label(name)
                .ok_or_else(|| Error::Partition(format!("matrix name {name:?} is not in the vocabulary")))?;
            if seen[id] {
                return Err(Error::Partition(format!(
                    "matrix lists category {name:?} more than once"
                )));
            }
            seen[id] = true;
            to_vocab[row] = id;
        }
        let mut counts = vec![vec![0.0; q]; q];
        if wire.counts.len() != q {
            return Err(Error::Partition(format!(
                "matrix has {} rows, expected {q}",
                wire.counts.len()
            )));
        }
        for (i, row) in wire.counts.iter().enumerate() {
            if row.len() != q {
                return Err(Error::Partition(format!(
                    "matrix row {i} has {} entries, expected {q}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                counts[to_vocab[i]][to_vocab[j]] = v;
            }
        }
        Self::new(counts)
    }

    pub fn q(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.counts[i][j]
    }

    /// Co-occurrence normalized by the geometric mean of the class
    /// frequencies, so frequent classes do not dominate the greedy score.
    pub fn normalized(&self, i: usize, j: usize) -> f64 {
        let d = self.counts[i][i] * self.counts[j][j];
        if d <= 0.0 {
            0.0
        } else {
            self.counts[i][j] / d.sqrt()
        }
    }
}

/// Greedy balanced grouping by co-occurrence affinity.
///
/// Groups are seeded farthest-first: the most frequent class starts the
/// first group, and each further group is anchored by the class least
/// co-occurring with the seeds so far, so seeds land in distinct
/// co-occurrence clusters. Remaining classes are assigned one at a time
/// to the currently smallest group, choosing whichever unplaced class has
/// the highest (`Co`) or lowest (`Disco`) mean normalized co-occurrence
/// with that group's members. Ties pick the lowest group index, then the
/// lowest category id.
pub fn partition_from_cooccurrence(
    matrix: &CooccurrenceMatrix,
    m: usize,
    mode: PartitionMode,
) -> Result<PartitionPlan> {
    let q = matrix.q();
    check_group_count(q, m)?;

    let first_seed = (0..q)
        .max_by(|&a, &b| {
            matrix
                .count(a, a)
                .partial_cmp(&matrix.count(b, b))
                .unwrap()
                .then(b.cmp(&a))
        })
        .expect("q >= 1");
    let mut seeds = vec![first_seed];
    while seeds.len() < m {
        let next = (0..q)
            .filter(|id| !seeds.contains(id))
            .min_by(|&a, &b| {
                let affinity = |id: usize| {
                    seeds.iter().map(|&s| matrix.normalized(id, s)).sum::<f64>()
                        / seeds.len() as f64
                };
                affinity(a)
                    .partial_cmp(&affinity(b))
                    .unwrap()
                    .then(
                        matrix
                            .count(b, b)
                            .partial_cmp(&matrix.count(a, a))
                            .unwrap(),
                    )
                    .then(a.cmp(&b))
            })
            .expect("m <= q");
        seeds.push(next);
    }
    let mut groups: Vec<Vec<usize>> = seeds.iter().map(|&id| vec![id]).collect();
    let mut unplaced: Vec<usize> = {
        let seeded: HashSet<usize> = seeds.iter().copied().collect();
        (0..q).filter(|id| !seeded.contains(id)).collect()
    };

    while !unplaced.is_empty() {
        let target = (0..m)
            .min_by_key(|&g| (groups[g].len(), g))
            .expect("m >= 1");
        let mut best: Option<(f64, usize)> = None;
        for (pos, &cand) in unplaced.iter().enumerate() {
            let mean: f64 = groups[target]
                .iter()
                .map(|&member| matrix.normalized(cand, member))
                .sum::<f64>()
                / groups[target].len() as f64;
            let better = match best {
                None => true,
                Some((best_score, best_pos)) => {
                    let diff = mean - best_score;
                    match mode {
                        PartitionMode::Co => diff > 0.0 || (diff == 0.0 && unplaced[best_pos] > cand),
                        PartitionMode::Disco => {
                            diff < 0.0 || (diff == 0.0 && unplaced[best_pos] > cand)
                        }
                    }
                }
            };
            if better {
                best = Some((mean, pos));
            }
        }
        let (_, pos) = best.expect("unplaced is non-empty");
        let cand = unplaced.remove(pos);
        groups[target].push(cand);
    }

    let strategy = match mode {
        PartitionMode::Co => PartitionStrategy::CooP,
        PartitionMode::Disco => PartitionStrategy::DiscP,
    };
    PartitionPlan::new(strategy, groups, q)
}

static GROUP_HEADER: OnceLock<Regex> = OnceLock::new();
static BULLET: OnceLock<Regex> = OnceLock::new();

fn group_header() -> &'static Regex {
    GROUP_HEADER.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:group\s+)?\d+\s*[:.)\]-]\s*(.*)$").expect("valid regex")
    })
}

fn bullet() -> &'static Regex {
    BULLET.get_or_init(|| Regex::new(r"^\s*[-*•]\s+(.*)$").expect("valid regex"))
}

/// Parses a model's free-text partition reply into a valid plan.
///
/// Numbered or bulleted lines start groups; names are comma-separated and
/// resolved through the vocabulary. The result is then repaired: duplicate
/// categories keep their first occurrence, groups beyond `m` are merged
/// into group `m`, and categories missing from the reply are appended to
/// the smallest group. Fails only when no known category is found at all.
pub fn parse_partition_response(
    text: &str,
    vocab: &CategoryVocabulary,
    m: usize,
    strategy: PartitionStrategy,
) -> Result<PartitionPlan> {
    check_group_count(vocab.len(), m)?;
    let mut raw_groups: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();

    for line in text.lines() {
        let line = line.trim().trim_matches(|c| "*_#`".contains(c)).trim();
        if line.is_empty() {
            continue;
        }
        let (starts_group, rest) = if let Some(cap) = group_header().captures(line) {
            (true, cap.get(1).map_or("", |m| m.as_str()).to_string())
        } else if let Some(cap) = bullet().captures(line) {
            (true, cap.get(1).map_or("", |m| m.as_str()).to_string())
        } else {
            (false, line.to_string())
        };
        if starts_group {
            raw_groups.push(Vec::new());
        } else if raw_groups.is_empty() {
            continue; // preamble before the first group marker
        }
        let current = raw_groups.last_mut().expect("group started");
        for token in rest.split(',') {
            if let Some(id) = vocab.normalize_label(token) {
                if seen.insert(id) {
                    current.push(id);
                }
            }
        }
    }

    if seen.is_empty() {
        return Err(Error::Partition(
            "partition reply resolves to zero known categories".into(),
        ));
    }

    // merge surplus groups into group m
    if raw_groups.len() > m {
        let extras: Vec<usize> = raw_groups.drain(m..).flatten().collect();
        raw_groups[m - 1].extend(extras);
    }

    // append missing categories to the smallest group, one at a time
    for id in 0..vocab.len() {
        if !seen.contains(&id) {
            let target = (0..raw_groups.len())
                .min_by_key(|&g| (raw_groups[g].len(), g))
                .expect("at least one group");
            raw_groups[target].push(id);
        }
    }

    raw_groups.retain(|g| !g.is_empty());
    PartitionPlan::new(strategy, raw_groups, vocab.len())
}

/// Invariant-violation report for a plan checked against `q` categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionReport {
    pub missing: Vec<usize>,
    pub duplicates: Vec<usize>,
    pub out_of_range: Vec<usize>,
    pub empty_groups: Vec<usize>,
}

impl PartitionReport {
    pub fn is_valid(&self) -> bool {
        self.missing.is_empty()
            && self.duplicates.is_empty()
            && self.out_of_range.is_empty()
            && self.empty_groups.is_empty()
    }
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "valid partition");
        }
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("not a cover: missing {:?}", self.missing));
        }
        if !self.duplicates.is_empty() {
            parts.push(format!("not disjoint: duplicate {:?}", self.duplicates));
        }
        if !self.out_of_range.is_empty() {
            parts.push(format!("out of range: {:?}", self.out_of_range));
        }
        if !self.empty_groups.is_empty() {
            parts.push(format!("empty groups at {:?}", self.empty_groups));
        }
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks the disjoint-cover and non-empty-group invariants.
pub fn validate_partition(plan: &PartitionPlan, q: usize) -> PartitionReport {
    let mut report = PartitionReport::default();
    let mut counts = vec![0usize; q];
    for (g, group) in plan.groups.iter().enumerate() {
        if group.is_empty() {
            report.empty_groups.push(g);
        }
        for &id in group {
            if id >= q {
                report.out_of_range.push(id);
            } else {
                counts[id] += 1;
            }
        }
    }
    for (id, &c) in counts.iter().enumerate() {
        if c == 0 {
            report.missing.push(id);
        } else if c > 1 {
            report.duplicates.push(id);
        }
    }
    report.out_of_range.sort_unstable();
    report.out_of_range.dedup();
    report
}

//! Annotation-quality metrics: micro and macro precision/recall/F1 from
//! per-class confusion counts, ranking-based average precision, and
//! top/bottom-k class reports.
//!
//! Precision, recall, and F1 are reported as percentages; AP and mAP as
//! fractions in [0, 1]. Macro averages and mAP exclude classes with fewer
//! ground-truth positives than a configurable floor; micro metrics always
//! use every class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::LabelVector;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ClassCounts {
    /// Ground-truth positives for the class.
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Per-class confusion counts over a dataset; every class sums to the
/// image count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    per_class: Vec<ClassCounts>,
    images: u64,
}

impl ConfusionCounts {
    pub fn from_classes(per_class: Vec<ClassCounts>) -> Result<Self> {
        let images = per_class.first().map_or(0, ClassCounts::total);
        for (k, c) in per_class.iter().enumerate() {
            if c.total() != images {
                return Err(Error::Eval(format!(
                    "class {k} sums to {} images, class 0 to {images}",
                    c.total()
                )));
            }
        }
        Ok(ConfusionCounts { per_class, images })
    }

    pub fn q(&self) -> usize {
        self.per_class.len()
    }

    pub fn images(&self) -> u64 {
        self.images
    }

    pub fn class(&self, k: usize) -> &ClassCounts {
        &self.per_class[k]
    }

    pub fn classes(&self) -> &[ClassCounts] {
        &self.per_class
    }
}

/// Tallies per-class confusion counts from aligned prediction and
/// ground-truth rows.
pub fn confusion(
    predictions: &[LabelVector],
    ground_truth: &[LabelVector],
) -> Result<ConfusionCounts> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Eval(format!(
            "{} prediction rows vs {} ground-truth rows",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let q = ground_truth.first().map_or(0, LabelVector::len);
    let mut per_class = vec![ClassCounts::default(); q];
    for (i, (pred, truth)) in predictions.iter().zip(ground_truth).enumerate() {
        if pred.len() != q || truth.len() != q {
            return Err(Error::Eval(format!(
                "row {i}: vector width {} / {} does not match q={q}",
                pred.len(),
                truth.len()
            )));
        }
        for (k, counts) in per_class.iter_mut().enumerate() {
            match (pred.get(k), truth.get(k)) {
                (true, true) => counts.true_pos += 1,
                (true, false) => counts.false_pos += 1,
                (false, true) => counts.false_neg += 1,
                (false, false) => counts.true_neg += 1,
            }
        }
    }
    ConfusionCounts::from_classes(per_class)
}

/// Ratio as a percentage; 0/0 contributes 0 so averages stay defined.
fn pct(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

/// Harmonic mean of a precision/recall pair, in the same units as its
/// inputs; 0 when both are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision/recall/F1: counts are pooled over all
/// classes before the ratios are taken.
pub fn overall_prf(counts: &ConfusionCounts) -> OverallPrf {
    let tp: u64 = counts.classes().iter().map(|c| c.true_pos).sum();
    let fp: u64 = counts.classes().iter().map(|c| c.false_pos).sum();
    let fn_: u64 = counts.classes().iter().map(|c| c.false_neg).sum();
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fn_);
    OverallPrf {
        precision,
        recall,
        f1: harmonic_f1(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub category: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub positives: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassPrf {
    /// Mean per-class precision over evaluated classes (CP).
    pub precision: f64,
    /// Mean per-class recall over evaluated classes (CR).
    pub recall: f64,
    /// Harmonic mean of the two aggregates (CF1), not the mean of
    /// per-class F1 values.
    pub f1: f64,
    pub classes: Vec<ClassPrf>,
    /// Classes left out for having fewer ground-truth positives than the
    /// floor.
    pub excluded: Vec<usize>,
}

/// Macro-averaged precision/recall/F1 with a minimum-positives floor.
/// Per-class 0/0 ratios contribute 0; exclusion is governed solely by
/// `min_positives`.
pub fn per_class_prf(counts: &ConfusionCounts, min_positives: u64) -> Result<PerClassPrf> {
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for (k, c) in counts.classes().iter().enumerate() {
        if c.positives() < min_positives {
            excluded.push(k);
            continue;
        }
        let precision = pct(c.true_pos, c.true_pos + c.false_pos);
        let recall = pct(c.true_pos, c.true_pos + c.false_neg);
        classes.push(ClassPrf {
            category: k,
            precision,
            recall,
            f1: harmonic_f1(precision, recall),
            positives: c.positives(),
        });
    }
    if classes.is_empty() {
        return Err(Error::Eval(format!(
            "no class has at least {min_positives} ground-truth positives"
        )));
    }
    let k = classes.len() as f64;
    let precision = classes.iter().map(|c| c.precision).sum::<f64>() / k;
    let recall = classes.iter().map(|c| c.recall).sum::<f64>() / k;
    Ok(PerClassPrf {
        precision,
        recall,
        f1: harmonic_f1(precision, recall),
        classes,
        excluded,
    })
}

/// How the AP numerator treats the anchor point itself.
///
/// `Exclusive` counts only positives ranked strictly higher than the
/// anchor, so a lone positive at rank 1 contributes 0/1 and constant
/// scores give AP 0. `Inclusive` adds the anchor back, recovering the
/// common convention where a perfect ranking scores 1.0. Both use the
/// strict-inequality rank, so tied scores share rank and numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApConvention {
    #[default]
    Exclusive,
    Inclusive,
}

/// Rank-based average precision of one score column against binary
/// labels. Requires at least one positive label and finite scores.
pub fn average_precision(
    scores: &[f64],
    labels: &[bool],
    convention: ApConvention,
) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::Eval("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut sum = 0.0;
    let mut seen_all = 0usize; // strictly higher than the current block
    let mut seen_pos = 0usize;
    let mut block = 0usize;
    while block < order.len() {
        let mut end = block;
        while end < order.len() && scores[order[end]] == scores[order[block]] {
            end += 1;
        }
        let block_pos = order[block..end].iter().filter(|&&i| labels[i]).count();
        let rank = 1 + seen_all;
        for _ in 0..block_pos {
            let numerator = match convention {
                ApConvention::Exclusive => seen_pos as f64,
                ApConvention::Inclusive => seen_pos as f64 + 1.0,
            };
            sum += numerator / rank as f64;
        }
        seen_all += end - block;
        seen_pos += block_pos;
        block = end;
    }
    Ok(sum / positives as f64)
}

/// Row-major n x q prediction scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    q: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, q: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * q {
            return Err(Error::Eval(format!(
                "score matrix has {} entries, expected {n}x{q}",
                data.len()
            )));
        }
        Ok(ScoreMatrix { n, q, data })
    }

    /// 0/1 scores from binary predictions.
    pub fn from_labels(predictions: &[LabelVector]) -> Result<Self> {
        let n = predictions.len();
        let q = predictions.first().map_or(0, LabelVector::len);
        let mut data = Vec::with_capacity(n * q);
        for (i, row) in predictions.iter().enumerate() {
            if row.len() != q {
                return Err(Error::Eval(format!(
                    "row {i} has width {}, expected {q}",
                    row.len()
                )));
            }
            for k in 0..q {
                data.push(if row.get(k) { 1.0 } else { 0.0 });
            }
        }
        Self::new(n, q, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.q + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    pub excluded: Vec<usize>,
}

/// Mean AP over classes with at least `min_positives` ground-truth
/// positives (zero-positive classes are always excluded).
pub fn mean_ap(
    scores: &ScoreMatrix,
    ground_truth: &[LabelVector],
    min_positives: u64,
    convention: ApConvention,
) -> Result<MeanAp> {
    if scores.n() != ground_truth.len() {
        return Err(Error::Eval(format!(
            "score matrix has {} rows, ground truth {}",
            scores.n(),
            ground_truth.len()
        )));
    }
    let q = scores.q();
    let floor = min_positives.max(1);
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..q {
        let labels: Vec<bool> = ground_truth.iter().map(|row| row.get(k)).collect();
        let positives = labels.iter().filter(|&&y| y).count() as u64;
        if positives < floor {
            excluded.push(k);
            continue;
        }
        let ap = average_precision(&scores.column(k), &labels, convention)?;
        per_class.push(ClassAp { category: k, ap });
    }
    if per_class.is_empty() {
        return Err(Error::Eval(format!(
            "no class has at least {floor} ground-truth positives"
        )));
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MeanAp {
        map,
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    Top,
    Bottom,
}

/// Top-k or bottom-k classes by value; ties break toward the lower
/// category id. `k` is clamped to the available count.
pub fn rank_classes(
    values: &[(usize, f64)],
    k: usize,
    direction: RankDirection,
) -> Vec<(usize, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).expect("finite metric values");
        match direction {
            RankDirection::Top => ord.reverse().then(a.0.cmp(&b.0)),
            RankDirection::Bottom => ord.then(a.0.cmp(&b.0)),
        }
    });
    sorted.truncate(k.min(values.len()));
    sorted
}

/// Full annotation-quality report. `op`/`or`/`of1` are micro-averaged,
/// `cp`/`cr`/`cf1` macro-averaged, all as percentages; `map` is a
/// fraction. `cost` passes through the run's query accounting untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: u64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub per_class: Vec<ClassPrf>,
    pub per_class_confusion: Vec<ClassCounts>,
    pub excluded: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_per_class: Option<Vec<ClassAp>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<serde_json::Value>,
}

/// Computes every metric in one pass. mAP is included when `scores` is
/// given; with binary predictions, pass
/// [`ScoreMatrix::from_labels`] and expect heavy score ties.
pub fn evaluate(
    predictions: &[LabelVector],
    ground_truth: &[LabelVector],
    scores: Option<&ScoreMatrix>,
    min_positives: u64,
    convention: ApConvention,
) -> Result<MetricsReport> {
    let counts = confusion(predictions, ground_truth)?;
    let overall = overall_prf(&counts);
    let per_class = per_class_prf(&counts, min_positives)?;
    let map = match scores {
        Some(scores) => Some(mean_ap(scores, ground_truth, min_positives, convention)?),
        None => None,
    };
    Ok(MetricsReport {
        images: counts.images(),
        op: overall.precision,
        or: overall.recall,
        of1: overall.f1,
        cp: per_class.precision,
        cr: per_class.recall,
        cf1: per_class.f1,
        per_class: per_class.classes,
        per_class_confusion: counts.classes().to_vec(),
        excluded: per_class.excluded,
        map: map.as_ref().map(|m| m.map),
        ap_per_class: map.map(|m| m.per_class),
        cost: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(bits: &[&[usize]], q: usize) -> Vec<LabelVector> {
        bits.iter()
            .map(|ids| LabelVector::from_ids(ids.iter().copied(), q).unwrap())
            .collect()
    }

    #[test]
    fn confusion_identity_and_complement() {
        let truth = rows(&[&[0], &[1], &[0, 1]], 2);
        let same = confusion(&truth, &truth).unwrap();
        for c in same.classes() {
            assert_eq!(c.false_pos, 0);
            assert_eq!(c.false_neg, 0);
        }
        let complement: Vec<LabelVector> = truth
            .iter()
            .map(|row| {
                LabelVector::from_ids((0..2).filter(|&k| !row.get(k)), 2).unwrap()
            })
            .collect();
        let anti = confusion(&complement, &truth).unwrap();
        for c in anti.classes() {
            assert_eq!(c.true_pos, 0);
            assert_eq!(c.true_neg, 0);
        }
    }

    #[test]
    fn confusion_hand_tally() {
        // 3 images, 2 classes, counted by hand
        let truth = rows(&[&[0], &[0, 1], &[1]], 2);
        let pred = rows(&[&[0, 1], &[1], &[]], 2);
        let counts = confusion(&pred, &truth).unwrap();
        assert_eq!(
            *counts.class(0),
            ClassCounts { true_pos: 1, false_pos: 0, true_neg: 1, false_neg: 1 }
        );
        assert_eq!(
            *counts.class(1),
            ClassCounts { true_pos: 1, false_pos: 1, true_neg: 0, false_neg: 1 }
        );
    }

    #[test]
    fn confusion_dimension_mismatch() {
        let a = rows(&[&[0]], 2);
        let b = rows(&[&[0], &[1]], 2);
        assert!(confusion(&a, &b).is_err());
        let c = rows(&[&[0]], 3);
        assert!(confusion(&c, &a).is_err());
    }

    #[test]
    fn overall_prf_single_class_arithmetic() {
        // tp=3 fp=1 fn=2 -> P=75, R=60, F1=66.67
        let counts = ConfusionCounts::from_classes(vec![ClassCounts {
            true_pos: 3,
            false_pos: 1,
            true_neg: 4,
            false_neg: 2,
        }])
        .unwrap();
        let prf = overall_prf(&counts);
        assert!((prf.precision - 75.0).abs() < 1e-9);
        assert!((prf.recall - 60.0).abs() < 1e-9);
        assert!((prf.f1 - 2.0 * 75.0 * 60.0 / 135.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let truth = rows(&[&[0], &[1], &[0, 1]], 2);
        let report = evaluate(&truth, &truth, None, 1, ApConvention::Inclusive).unwrap();
        for v in [report.op, report.or, report.of1, report.cp, report.cr, report.cf1] {
            assert!((v - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn macro_symmetry_and_exclusion() {
        // two classes with identical P=R=50
        let counts = ConfusionCounts::from_classes(vec![
            ClassCounts { true_pos: 1, false_pos: 1, true_neg: 1, false_neg: 1 },
            ClassCounts { true_pos: 1, false_pos: 1, true_neg: 1, false_neg: 1 },
        ])
        .unwrap();
        let prf = per_class_prf(&counts, 1).unwrap();
        assert!((prf.precision - 50.0).abs() < 1e-9);
        assert!((prf.recall - 50.0).abs() < 1e-9);
        assert!((prf.f1 - 50.0).abs() < 1e-9);

        // zero-positive class excluded; averages over the remaining two
        let counts = ConfusionCounts::from_classes(vec![
            ClassCounts { true_pos: 1, false_pos: 0, true_neg: 2, false_neg: 1 }, // P=100 R=50
            ClassCounts { true_pos: 1, false_pos: 1, true_neg: 1, false_neg: 1 }, // P=50 R=50
            ClassCounts { true_pos: 0, false_pos: 1, true_neg: 3, false_neg: 0 }, // no positives
        ])
        .unwrap();
        let prf = per_class_prf(&counts, 1).unwrap();
        assert_eq!(prf.excluded, vec![2]);
        assert!((prf.precision - 75.0).abs() < 1e-9);
        assert!((prf.recall - 50.0).abs() < 1e-9);
        assert!((prf.f1 - harmonic_f1(75.0, 50.0)).abs() < 1e-9);

        let all_excluded = per_class_prf(&counts, 100);
        assert!(all_excluded.is_err());
    }

    /// Direct O(n^2) transcription of the rank-based AP definition; the
    /// production path sorts instead.
    fn brute_force_ap(scores: &[f64], labels: &[bool], convention: ApConvention) -> f64 {
        let mut terms = Vec::new();
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            let higher_pos = (0..scores.len())
                .filter(|&j| labels[j] && scores[j] > scores[i])
                .count();
            let rank = 1 + (0..scores.len()).filter(|&j| scores[j] > scores[i]).count();
            let numerator = match convention {
                ApConvention::Exclusive => higher_pos as f64,
                ApConvention::Inclusive => higher_pos as f64 + 1.0,
            };
            terms.push(numerator / rank as f64);
        }
        terms.iter().sum::<f64>() / terms.len() as f64
    }

    #[test]
    fn ap_exclusive_locked_values() {
        // brute-forced by hand: terms 0/2 and 1/3 over two positives
        let scores = [0.9, 0.8, 0.7];
        let labels = [false, true, true];
        let ap = average_precision(&scores, &labels, ApConvention::Exclusive).unwrap();
        assert!((ap - brute_force_ap(&scores, &labels, ApConvention::Exclusive)).abs() < 1e-12);
        assert!((ap - (0.0 / 2.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);

        // all scores tied: ranks collapse to 1 and the numerator to 0
        let ap = average_precision(&[0.5, 0.5], &[true, false], ApConvention::Exclusive).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn ap_inclusive_perfect_ranking_is_one() {
        let scores = [0.9, 0.8, 0.1, 0.05];
        let labels = [true, true, false, false];
        let ap = average_precision(&scores, &labels, ApConvention::Inclusive).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_needs_a_positive() {
        assert!(average_precision(&[0.1], &[false], ApConvention::Exclusive).is_err());
        assert!(average_precision(&[f64::NAN], &[true], ApConvention::Exclusive).is_err());
    }

    #[test]
    fn ap_matches_brute_force_with_ties() {
        // deterministic pseudo-random instances with injected score ties
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..100 {
            let n = 3 + (next() * 15.0) as usize;
            let scores: Vec<f64> = (0..n).map(|_| (next() * 5.0).round() / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| next() < 0.4).collect();
            labels[0] = true;
            for convention in [ApConvention::Exclusive, ApConvention::Inclusive] {
                let fast = average_precision(&scores, &labels, convention).unwrap();
                let brute = brute_force_ap(&scores, &labels, convention);
                assert!((fast - brute).abs() < 1e-12, "n={n} {convention:?}");
            }
        }
    }

    #[test]
    fn ap_is_rank_invariant() {
        let scores = [0.9, 0.3, 0.5, 0.3, 0.1];
        let labels = [true, false, true, true, false];
        let transformed: Vec<f64> = scores.iter().map(|s: &f64| (s * 4.0).exp() + 7.0).collect();
        for convention in [ApConvention::Exclusive, ApConvention::Inclusive] {
            let a = average_precision(&scores, &labels, convention).unwrap();
            let b = average_precision(&transformed, &labels, convention).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_ap_is_the_mean() {
        // class 0 perfectly ranked, class 1 at AP 0.5 under Inclusive
        let truth = rows(&[&[0], &[1], &[]], 2);
        let scores = ScoreMatrix::new(
            3,
            2,
            vec![
                0.9, 0.1, //
                0.5, 0.2, //
                0.1, 0.8,
            ],
        )
        .unwrap();
        let result = mean_ap(&scores, &truth, 1, ApConvention::Inclusive).unwrap();
        let ap0 = average_precision(&scores.column(0), &[true, false, false], ApConvention::Inclusive).unwrap();
        let ap1 = average_precision(&scores.column(1), &[false, true, false], ApConvention::Inclusive).unwrap();
        assert!((result.map - (ap0 + ap1) / 2.0).abs() < 1e-12);
        assert_eq!(result.per_class.len(), 2);
    }

    #[test]
    fn rank_classes_ties_and_bounds() {
        let values = vec![(0, 0.5), (1, 0.9), (2, 0.5), (3, 0.1)];
        let top = rank_classes(&values, 2, RankDirection::Top);
        assert_eq!(top, vec![(1, 0.9), (0, 0.5)]);
        let bottom = rank_classes(&values, 3, RankDirection::Bottom);
        assert_eq!(bottom, vec![(3, 0.1), (0, 0.5), (2, 0.5)]);
        let all = rank_classes(&values, 10, RankDirection::Top);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn micro_metrics_are_image_permutation_invariant() {
        let truth = rows(&[&[0], &[1], &[0, 1], &[]], 2);
        let pred = rows(&[&[0, 1], &[1], &[0], &[1]], 2);
        let straight = overall_prf(&confusion(&pred, &truth).unwrap());
        let perm = [2, 0, 3, 1];
        let truth_p: Vec<LabelVector> = perm.iter().map(|&i| truth[i].clone()).collect();
        let pred_p: Vec<LabelVector> = perm.iter().map(|&i| pred[i].clone()).collect();
        let shuffled = overall_prf(&confusion(&pred_p, &truth_p).unwrap());
        assert_eq!(straight, shuffled);
    }

    #[test]
    fn report_keeps_harmonic_identities() {
        let truth = rows(&[&[0], &[1], &[0, 1], &[]], 2);
        let pred = rows(&[&[0, 1], &[1], &[0], &[1]], 2);
        let report = evaluate(&pred, &truth, None, 1, ApConvention::Exclusive).unwrap();
        assert!((report.of1 - harmonic_f1(report.op, report.or)).abs() < 1e-9);
        assert!((report.cf1 - harmonic_f1(report.cp, report.cr)).abs() < 1e-9);
    }
}

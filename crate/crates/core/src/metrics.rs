//! Evaluation measures.
//!
//! Ground truth and predictions are both expressed as [`RelInstance`]s keyed by
//! `(image, subject, object)`. Predicate 0 in a prediction means the pair was
//! routed to background, i.e. the model abstained.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// A subject-predicate-object triplet inside one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelInstance {
    pub image: u64,
    pub subject: u64,
    pub object: u64,
    pub predicate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RelInstance {
    pub fn key(&self) -> (u64, u64, u64) {
        (self.image, self.subject, self.object)
    }
}

fn prediction_index(predictions: &[RelInstance]) -> HashMap<(u64, u64, u64), usize> {
    predictions.iter().map(|p| (p.key(), p.predicate)).collect()
}

/// Recall of every predicate present in the ground truth. Pairs without a
/// prediction count as misses.
pub fn per_class_recall(predictions: &[RelInstance], ground_truth: &[RelInstance]) -> Result<BTreeMap<usize, f64>> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("ground truth is empty"));
    }
    let predicted = prediction_index(predictions);
    let mut tally: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for gt in ground_truth {
        let entry = tally.entry(gt.predicate).or_default();
        entry.1 += 1;
        if predicted.get(&gt.key()) == Some(&gt.predicate) {
            entry.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(class, (hit, total))| (class, hit as f64 / total as f64)).collect())
}

/// Mean predicate classification recall: per-class recall averaged over the
/// classes that occur in the ground truth.
pub fn mpcr(predictions: &[RelInstance], ground_truth: &[RelInstance]) -> Result<f64> {
    let recalls = per_class_recall(predictions, ground_truth)?;
    Ok(recalls.values().sum::<f64>() / recalls.len() as f64)
}

/// Fraction of ground-truth triplets matched exactly (subject, object,
/// predicate) by one of the first `k` retained predictions of their image,
/// pooled over the whole dataset.
pub fn micro_recall_at_k(
    ranked: &BTreeMap<u64, Vec<RelInstance>>,
    ground_truth: &[RelInstance],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("ground truth is empty"));
    }
    let retained: HashSet<(u64, u64, u64, usize)> = ranked
        .values()
        .flat_map(|list| list.iter().take(k))
        .map(|p| (p.image, p.subject, p.object, p.predicate))
        .collect();
    let matched =
        ground_truth.iter().filter(|g| retained.contains(&(g.image, g.subject, g.object, g.predicate))).count();
    Ok(matched as f64 / ground_truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub retained: usize,
    pub ground_truth: usize,
}

/// Precision, recall and F1 of retained (foreground, top-K) triplets.
/// Background decisions are abstentions and never enter the denominator.
pub fn precision_recall_f1(retained: &[RelInstance], ground_truth: &[RelInstance]) -> Result<PrecisionRecall> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("ground truth is empty"));
    }
    let truth: HashSet<(u64, u64, u64, usize)> =
        ground_truth.iter().map(|g| (g.image, g.subject, g.object, g.predicate)).collect();
    let matched = retained
        .iter()
        .filter(|p| p.predicate != 0 && truth.contains(&(p.image, p.subject, p.object, p.predicate)))
        .count();
    let kept = retained.iter().filter(|p| p.predicate != 0).count();
    let precision = if kept == 0 { 0.0 } else { matched as f64 / kept as f64 };
    let recall = matched as f64 / ground_truth.len() as f64;
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PrecisionRecall { precision, recall, f1, matched, retained: kept, ground_truth: ground_truth.len() })
}

/// One equal-width confidence bin `(lower, upper]` (the first bin also holds 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn bin_index(score: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut b = ((score * m).ceil() as usize).saturating_sub(1).min(num_bins - 1);
    // Snap to the exact (b/M, (b+1)/M] boundaries as computed by division.
    while b > 0 && score <= b as f64 / m {
        b -= 1;
    }
    while b + 1 < num_bins && score > (b + 1) as f64 / m {
        b += 1;
    }
    b
}

/// Per-bin reliability table.
pub fn reliability_bins(scores: &[f64], correct: &[bool], num_bins: usize) -> Result<Vec<CalibrationBin>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no predictions to calibrate"));
    }
    if scores.len() != correct.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} correctness flags", scores.len()),
            found: correct.len().to_string(),
        });
    }
    if num_bins == 0 {
        return Err(Error::InvalidConfig("at least one bin is required".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidConfig(format!("score {s} outside [0, 1]")));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&s, &ok) in scores.iter().zip(correct) {
        let b = bin_index(s, num_bins);
        count[b] += 1;
        conf[b] += s;
        hits[b] += usize::from(ok);
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: n,
                mean_confidence: if n == 0 { 0.0 } else { conf[b] / n as f64 },
                accuracy: if n == 0 { 0.0 } else { hits[b] as f64 / n as f64 },
            }
        })
        .collect())
}

/// `Σ_m (|B_m| / n) |acc(B_m) - conf(B_m)|` over equal-width bins.
pub fn expected_calibration_error(scores: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    let bins = reliability_bins(scores, correct, num_bins)?;
    Ok(ece_from_bins(&bins, scores.len()))
}

pub fn ece_from_bins(bins: &[CalibrationBin], total: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Square count table, rows = true class, columns = predicted class, both in
/// the same display order (most frequent ground-truth class first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<usize>,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    /// `classes` gives the label of each row/column position.
    pub fn new(classes: Vec<usize>, counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != classes.len() || counts.ncols() != classes.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0}", classes.len()),
                found: format!("{}x{}", counts.nrows(), counts.ncols()),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Count of `truth` predicted as `predicted`, by class label.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        match (self.position(truth), self.position(predicted)) {
            (Some(r), Some(c)) => self.counts[[r, c]],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Ground-truth support of `class`.
    pub fn row_sum(&self, class: usize) -> u64 {
        self.position(class).map_or(0, |r| self.counts.row(r).sum())
    }
}

/// Confusion counts over all ground-truth pairs. A missing prediction counts
/// as background; with `include_background = false` any background decision is
/// an error, since it would have no column.
pub fn confusion(
    predictions: &[RelInstance],
    ground_truth: &[RelInstance],
    num_classes: usize,
    include_background: bool,
) -> Result<ConfusionMatrix> {
    let predicted = prediction_index(predictions);
    let min_pred = if include_background { 0 } else { 1 };
    let mut freq = vec![0u64; num_classes + 1];
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(ground_truth.len());
    for gt in ground_truth {
        if gt.predicate < 1 || gt.predicate > num_classes {
            return Err(Error::LabelOutOfRange { label: gt.predicate, min: 1, max: num_classes });
        }
        let pred = predicted.get(&gt.key()).copied().unwrap_or(0);
        if pred < min_pred || pred > num_classes {
            return Err(Error::LabelOutOfRange { label: pred, min: min_pred, max: num_classes });
        }
        freq[gt.predicate] += 1;
        cells.push((gt.predicate, pred));
    }

    let mut classes: Vec<usize> = (1..=num_classes).collect();
    classes.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    if include_background {
        classes.push(0);
    }
    let mut position = vec![0usize; num_classes + 1];
    for (i, &c) in classes.iter().enumerate() {
        position[c] = i;
    }
    let mut counts = Array2::zeros((classes.len(), classes.len()));
    for (t, p) in cells {
        counts[[position[t], position[p]]] += 1;
    }
    ConfusionMatrix::new(classes, counts)
}

/// Share of classes with at least one true instance and no correct prediction.
pub fn zero_recall_fraction(confusion: &ConfusionMatrix) -> Result<f64> {
    let mut supported = 0usize;
    let mut zero = 0usize;
    for (i, row) in confusion.counts().rows().into_iter().enumerate() {
        if row.sum() == 0 {
            continue;
        }
        supported += 1;
        if row[i] == 0 {
            zero += 1;
        }
    }
    if supported == 0 {
        return Err(Error::EmptyInput("confusion matrix has no true instances"));
    }
    Ok(zero as f64 / supported as f64)
}

/// Outcome of a two-sided t-test at the 95% level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub critical: f64,
    pub significant: bool,
}

fn mean_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn two_sided_critical(dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).expect("degrees of freedom are positive").inverse_cdf(0.975)
}

fn finish(t: f64, dof: f64) -> TTest {
    let critical = two_sided_critical(dof);
    TTest { t, dof, critical, significant: t.abs() > critical }
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::EmptyInput("each sample needs at least two values"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::DegenerateVariance("both samples are constant"));
    }
    let dof = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(finish((ma - mb) / se2.sqrt(), dof))
}

/// One-sample Student's t-test of the sample mean against `reference`.
pub fn one_sample_t_test(sample: &[f64], reference: f64) -> Result<TTest> {
    if sample.len() < 2 {
        return Err(Error::EmptyInput("sample needs at least two values"));
    }
    let (m, v) = mean_var(sample);
    if v <= 0.0 {
        return Err(Error::DegenerateVariance("sample is constant"));
    }
    let n = sample.len() as f64;
    Ok(finish((m - reference) / (v / n).sqrt(), n - 1.0))
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_k: f64,
    pub mpcr: f64,
    pub precision: f64,
    pub f1: f64,
    pub ece: f64,
    pub zero_recall_fraction: f64,
    pub per_class_recall: BTreeMap<usize, f64>,
    pub confusion: ConfusionMatrix,
    pub k: usize,
    pub nrf: bool,
    pub theta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rel(image: u64, subject: u64, predicate: usize) -> RelInstance {
        RelInstance { image, subject, object: subject + 1, predicate, score: None }
    }

    #[test]
    fn mpcr_differs_from_micro_recall() {
        let gt = vec![rel(0, 0, 1), rel(0, 2, 1), rel(0, 4, 2), rel(0, 6, 2), rel(1, 0, 2), rel(1, 2, 2)];
        let pred = vec![rel(0, 0, 1), rel(0, 2, 1), rel(0, 4, 2), rel(0, 6, 1), rel(1, 0, 0), rel(1, 2, 1)];
        assert!((mpcr(&pred, &gt).unwrap() - 0.625).abs() < 1e-15);
        let mut ranked = BTreeMap::new();
        for p in pred.iter().filter(|p| p.predicate != 0) {
            ranked.entry(p.image).or_insert_with(Vec::new).push(*p);
        }
        assert!((micro_recall_at_k(&ranked, &gt, 100).unwrap() - 0.5).abs() < 1e-15);

        assert_eq!(mpcr(&gt, &gt).unwrap(), 1.0);
        let half = vec![rel(0, 0, 1), rel(0, 2, 1), rel(0, 4, 1), rel(0, 6, 1), rel(1, 0, 1), rel(1, 2, 1)];
        assert_eq!(mpcr(&half, &gt).unwrap(), 0.5);
        assert!(mpcr(&pred, &[]).is_err());
    }

    #[test]
    fn recall_at_k_counts() {
        let gt = vec![rel(0, 0, 1), rel(0, 2, 2), rel(0, 4, 3)];
        let mut ranked = BTreeMap::new();
        ranked.insert(0, vec![rel(0, 0, 1), rel(0, 2, 1), rel(0, 4, 3)]);
        assert!((micro_recall_at_k(&ranked, &gt, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((micro_recall_at_k(&ranked, &gt, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        ranked.insert(0, gt.clone());
        assert_eq!(micro_recall_at_k(&ranked, &gt, 50).unwrap(), 1.0);
        assert_eq!(micro_recall_at_k(&BTreeMap::new(), &gt, 50).unwrap(), 0.0);
        assert!(micro_recall_at_k(&ranked, &gt, 0).is_err());
    }

    #[test]
    fn precision_recall_examples() {
        let gt: Vec<RelInstance> = (0..20).map(|i| rel(0, 2 * i, 1)).collect();
        let retained: Vec<RelInstance> = (0..10).map(|i| rel(0, 2 * i, if i < 4 { 1 } else { 2 })).collect();
        let pr = precision_recall_f1(&retained, &gt).unwrap();
        assert!((pr.precision - 0.4).abs() < 1e-15);
        assert!((pr.recall - 0.2).abs() < 1e-15);
        assert!((pr.f1 - 0.266667).abs() < 1e-6);

        let pr = precision_recall_f1(&gt, &gt).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.f1), (1.0, 1.0, 1.0));

        let pr = precision_recall_f1(&[], &gt).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.f1), (0.0, 0.0, 0.0));
        assert!(precision_recall_f1(&gt, &[]).is_err());
    }

    #[test]
    fn ece_examples() {
        let ece = expected_calibration_error(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, true], 10).unwrap();
        assert!((ece - 0.4).abs() < 1e-12, "{ece}");
        assert_eq!(expected_calibration_error(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
        let one_bin = expected_calibration_error(&[0.2, 0.7, 0.0], &[true, false, true], 1).unwrap();
        assert!((one_bin - (2.0 / 3.0 - 0.3)).abs() < 1e-12);
        assert!(expected_calibration_error(&[], &[], 10).is_err());
        assert!(expected_calibration_error(&[0.5], &[true], 0).is_err());
        assert!(expected_calibration_error(&[1.5], &[true], 10).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.7, 10), 6);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn confusion_and_zero_recall() {
        let gt = vec![rel(0, 0, 1), rel(0, 2, 2), rel(0, 4, 2), rel(0, 6, 3)];
        let pred = vec![rel(0, 0, 1), rel(0, 2, 2), rel(0, 4, 1), rel(0, 6, 2)];
        let cm = confusion(&pred, &gt, 3, false).unwrap();
        assert_eq!(cm.classes(), &[2, 1, 3]);
        assert_eq!(cm.get(2, 1), 1);
        assert_eq!(cm.get(3, 2), 1);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.row_sum(2), 2);
        assert!((zero_recall_fraction(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let cm = confusion(&gt, &gt, 3, false).unwrap();
        assert_eq!(zero_recall_fraction(&cm).unwrap(), 0.0);
        let off = vec![rel(0, 0, 2), rel(0, 2, 1), rel(0, 4, 3), rel(0, 6, 1)];
        assert_eq!(zero_recall_fraction(&confusion(&off, &gt, 3, false).unwrap()).unwrap(), 1.0);

        let single = confusion(&[rel(9, 0, 2)], &[rel(9, 0, 1)], 2, false).unwrap();
        assert_eq!(single.get(1, 2), 1);
        assert_eq!(single.total(), 1);

        let with_bg = confusion(&[rel(0, 0, 0)], &gt, 3, true).unwrap();
        assert_eq!(with_bg.classes(), &[2, 1, 3, 0]);
        assert_eq!(with_bg.get(1, 0), 1);
        assert_eq!(with_bg.get(2, 0), 2);
        assert!(confusion(&[rel(0, 0, 0)], &gt, 3, false).is_err());
        assert!(confusion(&pred, &[rel(0, 0, 7)], 3, false).is_err());

        let empty = ConfusionMatrix::new(vec![1, 2], Array2::zeros((2, 2))).unwrap();
        assert!(zero_recall_fraction(&empty).is_err());
        assert!(ConfusionMatrix::new(vec![1], array![[1, 2], [3, 4]]).is_err());
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 1.1, 0.9, 1.0, 1.05];
        let b = [2.0, 2.1, 1.9, 2.0, 2.05];
        // Hand computation: both variances 0.0055, t = -1/sqrt(0.0022), dof = 8.
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t + 1.0 / 0.0022f64.sqrt()).abs() < 1e-9, "{}", r.t);
        assert!((r.dof - 8.0).abs() < 1e-9);
        assert!((r.critical - 2.306004).abs() < 1e-5);
        assert!(r.significant);

        let same = welch_t_test(&a, &a).unwrap();
        assert_eq!(same.t, 0.0);
        assert!(!same.significant);

        assert!(matches!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::DegenerateVariance(_))));
        assert!(welch_t_test(&[1.0], &b).is_err());

        let r = one_sample_t_test(&[0.52, 0.53, 0.51, 0.52, 0.52], 0.52).unwrap();
        assert!(r.t.abs() < 1e-9);
        assert!(!r.significant);
        assert!((r.dof - 4.0).abs() < 1e-15);
        assert!(one_sample_t_test(&[0.6, 0.61, 0.62, 0.6, 0.61], 0.52).unwrap().significant);
        assert!(one_sample_t_test(&[0.3, 0.3], 0.1).is_err());
    }
}

//! Confusion-matrix metrics, rank-based AUC, and per-run metric reports.
//!
//! Undefined metrics (zero denominators) are reported as 0 with an explicit
//! flag instead of aborting, so batch reports always complete.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::{classify, LinkPrediction};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Tally predicted labels against gold labels.
    pub fn from_labels(predicted: &[u8], gold: &[u8]) -> Result<ConfusionMatrix> {
        if predicted.len() != gold.len() {
            return Err(Error::Shape {
                expected: (gold.len(), 1),
                got: (predicted.len(), 1),
            });
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (1, 1) => cm.true_pos += 1,
                (1, 0) => cm.false_pos += 1,
                (0, 1) => cm.false_neg += 1,
                (0, 0) => cm.true_neg += 1,
                _ => {
                    return Err(Error::Config(format!(
                        "labels must be 0 or 1, got predicted {p}, gold {g}"
                    )))
                }
            }
        }
        Ok(cm)
    }
}

/// Which metrics had a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub mcc: bool,
    pub acc: bool,
    pub auc: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.mcc || self.acc || self.auc
    }
}

/// All six metrics for one evaluation run. Fractions in [0, 1] (MCC in
/// [-1, 1]); the CSV rendering converts to percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub acc: f64,
    pub auc: f64,
    pub undefined: UndefinedFlags,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "project,architecture,adv,f1,precision,recall,mcc,auc,acc";

    /// One report row, percentages with two decimals.
    pub fn csv_row(&self, project: &str, architecture: &str, adv: &str) -> String {
        format!(
            "{project},{architecture},{adv},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            self.f1 * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
            self.mcc * 100.0,
            self.auc * 100.0,
            self.acc * 100.0,
        )
    }
}

/// Precision, recall, F1, MCC, and accuracy from a confusion matrix. The AUC
/// field is left undefined; `evaluate` fills it from raw scores.
pub fn metrics(cm: &ConfusionMatrix) -> MetricReport {
    let tp = cm.true_pos as f64;
    let fp = cm.false_pos as f64;
    let fn_ = cm.false_neg as f64;
    let tn = cm.true_neg as f64;

    let mut report = MetricReport {
        undefined: UndefinedFlags {
            auc: true,
            ..Default::default()
        },
        ..Default::default()
    };

    if cm.true_pos + cm.false_pos > 0 {
        report.precision = tp / (tp + fp);
    } else {
        report.undefined.precision = true;
    }
    if cm.true_pos + cm.false_neg > 0 {
        report.recall = tp / (tp + fn_);
    } else {
        report.undefined.recall = true;
    }
    if report.undefined.precision
        || report.undefined.recall
        || report.precision + report.recall == 0.0
    {
        report.undefined.f1 = true;
    } else {
        report.f1 = 2.0 * report.precision * report.recall / (report.precision + report.recall);
    }
    let mcc_den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if mcc_den > 0.0 {
        report.mcc = (tp * tn - fp * fn_) / mcc_den.sqrt();
    } else {
        report.undefined.mcc = true;
    }
    if cm.total() > 0 {
        report.acc = (tp + tn) / cm.total() as f64;
    } else {
        report.undefined.acc = true;
    }
    report
}

/// Rank AUC in the Mann-Whitney formulation: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties counted
/// half. Returns `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: (labels.len(), 1),
            got: (scores.len(), 1),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores"));

    // Midranks over tied scores, 1-based.
    let mut ranks = vec![0.0f64; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = midrank;
        }
        start = end + 1;
    }

    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// Classify at the threshold, tally the confusion matrix, and compute all six
/// metrics; AUC comes from the raw probabilities.
pub fn evaluate(
    predictions: &[LinkPrediction],
    gold: &[u8],
    threshold: f64,
) -> Result<MetricReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape {
            expected: (gold.len(), 1),
            got: (predictions.len(), 1),
        });
    }
    let predicted: Vec<u8> = predictions.iter().map(|p| classify(p, threshold)).collect();
    let cm = ConfusionMatrix::from_labels(&predicted, gold)?;
    let mut report = metrics(&cm);
    let scores: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    match auc(&scores, gold)? {
        Some(v) => {
            report.auc = v;
            report.undefined.auc = false;
        }
        None => report.undefined.auc = true,
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::ArchKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(tp: usize, fp: usize, fn_: usize, tn: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            true_neg: tn,
        }
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let r = metrics(&cm(2, 0, 0, 2));
        assert_eq!(
            (r.precision, r.recall, r.f1, r.acc, r.mcc),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert!(!r.undefined.precision && !r.undefined.mcc);
    }

    #[test]
    fn uniform_confusion_matrix_is_symmetric() {
        let r = metrics(&cm(1, 1, 1, 1));
        assert_eq!(r.mcc, 0.0);
        assert_eq!(r.acc, 0.5);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn worked_example_matches_hand_arithmetic() {
        let r = metrics(&cm(3, 1, 2, 4));
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.6).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.mcc - 10.0 / 600.0_f64.sqrt()).abs() < 1e-12);
        assert!((r.acc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_raise_flags_not_errors() {
        let r = metrics(&cm(0, 0, 3, 5));
        assert!(r.undefined.precision);
        assert!(!r.undefined.recall);
        assert_eq!(r.recall, 0.0);
        assert!(r.undefined.f1);
        assert!(r.undefined.mcc);
        assert_eq!(r.precision, 0.0);
    }

    #[test]
    fn mcc_symmetries_hold_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (tp, fp, fn_, tn) = (
                rng.gen_range(1..50usize),
                rng.gen_range(1..50usize),
                rng.gen_range(1..50usize),
                rng.gen_range(1..50usize),
            );
            let base = metrics(&cm(tp, fp, fn_, tn)).mcc;
            // Swapping the classes' roles preserves MCC.
            let swapped = metrics(&cm(tn, fn_, fp, tp)).mcc;
            assert!((base - swapped).abs() < 1e-12);
            // Inverting the predicted labels negates it.
            let inverted = metrics(&cm(fn_, tn, tp, fp)).mcc;
            assert!((base + inverted).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(),
            Some(1.0)
        );
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), Some(0.5));
        let v = auc(&[0.8, 0.7, 0.4, 0.2], &[1, 0, 1, 0]).unwrap().unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(auc(&[0.4, 0.2], &[1, 1]).unwrap(), None);
    }

    /// Exhaustive pair enumeration, the independent oracle for the rank AUC.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn rank_auc_matches_pair_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.gen_range(5..120usize);
            // Coarse grid injects plenty of tied scores.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap().unwrap();
            let slow = pairwise_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let scores: Vec<f64> = (0..80).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..80).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auc(&scores, &labels).unwrap().unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 0.5).collect();
        let transformed = auc(&warped, &labels).unwrap().unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    fn prediction(p: f64) -> LinkPrediction {
        LinkPrediction {
            probability: p,
            per_template_probabilities: None,
            architecture: ArchKind::Single,
        }
    }

    #[test]
    fn evaluate_full_report_on_perfect_predictions() {
        let preds: Vec<LinkPrediction> = [0.99, 0.98, 0.02, 0.01].iter().map(|&p| prediction(p)).collect();
        let gold = [1, 1, 0, 0];
        let r = evaluate(&preds, &gold, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.acc, r.mcc, r.auc), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(!r.undefined.any());
    }

    #[test]
    fn evaluate_flipped_predictions_on_balanced_set() {
        let preds: Vec<LinkPrediction> = [0.01, 0.05, 0.95, 0.99].iter().map(|&p| prediction(p)).collect();
        let gold = [1, 1, 0, 0];
        let r = evaluate(&preds, &gold, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(r.undefined.f1); // P + R is zero, flagged and reported as 0
        assert_eq!(r.mcc, -1.0);
        assert_eq!(r.auc, 0.0);
    }

    #[test]
    fn evaluate_rejects_length_mismatch() {
        let preds = vec![prediction(0.5)];
        assert!(matches!(
            evaluate(&preds, &[1, 0], 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn csv_row_is_percent_with_two_decimals() {
        let r = MetricReport {
            precision: 0.9683,
            recall: 0.7931,
            f1: 0.8679,
            mcc: 0.8679,
            acc: 0.934,
            auc: 0.8679,
            undefined: Default::default(),
        };
        assert_eq!(
            r.csv_row("log4net", "multi", "off"),
            "log4net,multi,off,86.79,96.83,79.31,86.79,86.79,93.40"
        );
    }
}

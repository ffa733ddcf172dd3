use serde::Serialize;

use crate::error::{invalid, Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("labels must be 0 or 1"));
    }
    Ok(())
}

fn check_lengths(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    check_labels(labels)
}

/// A score at or above `threshold` predicts the positive class.
pub fn confusion_counts(scores: &[f64], labels: &[f64], threshold: f64) -> Result<Confusion> {
    check_lengths(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, with 0 when both inputs are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(precision, recall, f1)`; every 0/0 is 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_from(p, r))
}

/// Twice the Mann–Whitney statistic: for every positive/negative pair a win
/// scores 2 and a tie 1. Returns `(wins2, positives, negatives)`.
pub fn mann_whitney_wins2(scores: &[f64], labels: &[f64]) -> Result<(u128, u64, u64)> {
    check_lengths(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins2, mut neg_below) = (0u128, 0u64);
    let (mut pos_total, mut neg_total) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1.0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins2 += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
        neg_below += n;
        pos_total += p;
        neg_total += n;
        i = j;
    }
    Ok((wins2, pos_total, neg_total))
}

/// Area under the ROC curve as the probability that a random positive
/// outranks a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (wins2, p, n) = mann_whitney_wins2(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(invalid("AUC undefined: labels contain a single class"));
    }
    Ok(wins2 as f64 / (2 * p as u128 * n as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the labels hold a single class.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
}

pub fn metrics_report(scores: &[f64], labels: &[f64], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(invalid("cannot score an empty dataset"));
    }
    let c = confusion_counts(scores, labels, threshold)?;
    let (precision, recall, f1) = precision_recall_f1(c.tp, c.fp, c.fn_);
    let auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(_) if labels.iter().all(|&y| y == labels[0]) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        auc,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let c = confusion_counts(&[0.9, 0.4], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 0, 0));
        let c = confusion_counts(&[0.5], &[0.0], 0.5).unwrap();
        assert_eq!(c.fp, 1);
        let c = confusion_counts(&[0.8, 0.1], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert!(confusion_counts(&[0.5], &[1.0, 0.0], 0.5).is_err());
        assert!(confusion_counts(&[0.5], &[1.0], 1.0).is_err());
    }

    #[test]
    fn prf_examples() {
        assert_eq!(precision_recall_f1(1, 1, 1), (0.5, 0.5, 0.5));
        assert_eq!(precision_recall_f1(0, 0, 0), (0.0, 0.0, 0.0));
        assert!((f1_from(0.7629, 0.7271) - 0.7446).abs() < 1e-4);
        assert!((f1_from(0.6583, 0.3827) - 0.4840).abs() < 1e-4);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn single_class_report_has_no_auc() {
        let r = metrics_report(&[0.9, 0.2], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.accuracy, 0.5);
        assert!(metrics_report(&[], &[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn auc_monotone_invariance(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60),
            a in 0.1f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 10.0 - 1.0).collect();
            let labels: Vec<f64> = raw.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();
            prop_assume!(labels.contains(&1.0) && labels.contains(&0.0));
            let base = roc_auc(&scores, &labels).unwrap();
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            prop_assert_eq!(roc_auc(&e, &labels).unwrap(), base);
            prop_assert_eq!(roc_auc(&aff, &labels).unwrap(), base);
        }

        #[test]
        fn report_is_consistent(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..80),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<f64> = raw.iter().map(|r| if r.1 { 1.0 } else { 0.0 }).collect();
            let r = metrics_report(&scores, &labels, 0.5).unwrap();
            prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, scores.len());
            prop_assert!((r.f1 - f1_from(r.precision, r.recall)).abs() < 1e-15);
            for v in [r.accuracy, r.precision, r.recall, r.f1, r.auc.unwrap_or(0.5)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

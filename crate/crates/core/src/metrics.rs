//! Per-label evaluation: confusion counts, precision, recall, F1 and ROC AUC.
//!
//! Undefined values (empty denominators, single-class AUC input) are `None`,
//! never a silent zero. Accuracy, specificity and mAP are deliberately not
//! offered: they are dominated by majority labels.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PredictionVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    pub fn incorrect(&self) -> u64 {
        self.fp + self.fn_
    }
}

pub fn confusion(predictions: &[PredictionVector], truths: &[Vec<u8>], label: usize, threshold: f64) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: predictions.len(),
            actual: truths.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in predictions.iter().zip(truths) {
        let (Some(&prob), Some(&truth)) = (p.probabilities.get(label), t.get(label)) else {
            return Err(Error::LabelOutOfRange {
                index: label,
                labels: p.len().min(t.len()),
            });
        };
        match (prob >= threshold, truth == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    let d = c.tp + c.fp;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    let d = c.tp + c.fn_;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

/// Harmonic mean of precision and recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    /// True when an input was undefined or zero and `value` is the
    /// conventional 0.
    pub flagged: bool,
}

pub fn f1(precision: Option<f64>, recall: Option<f64>) -> F1 {
    match (precision, recall) {
        (Some(p), Some(r)) if p > 0.0 && r > 0.0 => F1 {
            value: 2.0 * p * r / (p + r),
            flagged: false,
        },
        _ => F1 {
            value: 0.0,
            flagged: true,
        },
    }
}

/// ROC AUC by the rank-sum / pair-counting identity: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups, then Mann-Whitney U.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos as f64 * neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label_index: usize,
    pub round_index: u32,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    #[serde(default)]
    pub f1_flagged: bool,
    pub auc: Option<f64>,
    pub correct_count: u64,
    pub incorrect_count: u64,
}

/// Metrics for one label from test-split predictions.
pub fn report(
    predictions: &[PredictionVector],
    truths: &[Vec<u8>],
    label: usize,
    round: u32,
    threshold: f64,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = confusion(predictions, truths, label, threshold)?;
    let p = precision(&c);
    let r = recall(&c);
    let f = f1(p, r);
    let scores: Vec<f64> = predictions.iter().map(|p| p.probabilities[label]).collect();
    let labels: Vec<u8> = truths.iter().map(|t| t[label]).collect();
    Ok(MetricsReport {
        label_index: label,
        round_index: round,
        precision: p,
        recall: r,
        f1: if f.flagged && (p.is_none() || r.is_none()) { None } else { Some(f.value) },
        f1_flagged: f.flagged,
        auc: auc(&scores, &labels)?,
        correct_count: c.correct(),
        incorrect_count: c.incorrect(),
    })
}

/// Reports for one label across rounds, in strictly increasing round order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundHistory {
    pub reports: Vec<MetricsReport>,
}

impl RoundHistory {
    pub fn push(&mut self, report: MetricsReport) -> Result<()> {
        if let Some(last) = self.reports.iter().rev().find(|r| r.label_index == report.label_index) {
            if report.round_index <= last.round_index {
                return Err(Error::InvalidArgument(alloc::format!(
                    "round {} does not follow round {}",
                    report.round_index,
                    last.round_index
                )));
            }
        }
        self.reports.push(report);
        Ok(())
    }

    pub fn for_label(&self, label: usize) -> impl Iterator<Item = &MetricsReport> {
        self.reports.iter().filter(move |r| r.label_index == label)
    }

    pub fn latest_round(&self) -> Option<u32> {
        self.reports.iter().map(|r| r.round_index).max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pv(p: f64) -> PredictionVector {
        PredictionVector::new(vec![p])
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[pv(0.9), pv(0.2)], &[vec![1], vec![0]], 0, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
        let preds = vec![pv(1.0); 4];
        let truths = vec![vec![1], vec![0], vec![1], vec![0]];
        let c = confusion(&preds, &truths, 0, 0.5).unwrap();
        assert_eq!((c.tp, c.fp), (2, 2));
        assert!(confusion(&preds, &truths[..3], 0, 0.5).is_err());
    }

    #[test]
    fn precision_recall_examples() {
        let c = ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 0 };
        assert!((precision(&c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision(&ConfusionCounts::default()), None);
        let c = ConfusionCounts { tp: 3, fp: 0, tn: 0, fn_: 1 };
        assert_eq!(recall(&c), Some(0.75));
        assert_eq!(recall(&ConfusionCounts::default()), None);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(Some(0.5), Some(0.5)).value, 0.5);
        let b = f1(Some(1.0), Some(0.0));
        assert_eq!(b.value, 0.0);
        assert!(b.flagged);
        assert!((f1(Some(0.160), Some(0.375)).value - 0.2243).abs() < 1e-4);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]).unwrap(), None);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), Some(0.5));
    }

    #[test]
    fn report_partitions_counts() {
        let preds = vec![pv(0.9), pv(0.4), pv(0.6), pv(0.1)];
        let truths = vec![vec![1], vec![1], vec![0], vec![0]];
        let r = report(&preds, &truths, 0, 0, 0.5).unwrap();
        assert_eq!(r.correct_count + r.incorrect_count, 4);
        assert_eq!(r.auc, Some(0.75));
    }

    #[test]
    fn history_rounds_increase() {
        let mut h = RoundHistory::default();
        let mk = |round| MetricsReport {
            label_index: 0,
            round_index: round,
            precision: None,
            recall: None,
            f1: None,
            f1_flagged: true,
            auc: None,
            correct_count: 0,
            incorrect_count: 0,
        };
        h.push(mk(0)).unwrap();
        h.push(mk(1)).unwrap();
        assert!(h.push(mk(1)).is_err());
    }
}

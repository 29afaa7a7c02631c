//! Classification metrics: confusion counts, precision/recall/F1, accuracy
//! and the exact Mann-Whitney AUC.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Count predictions `score >= threshold` against labels.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// `num/den` with `0/0 = 0`.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Twice the Mann-Whitney U statistic and the number of positive/negative
/// pairs, so that `AUC = twice_u / (2 · pairs)` exactly. Ties count half.
pub fn auc_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc of NaN scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok((twice_u, pos * neg))
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (twice_u, pairs) = auc_counts(scores, labels)?;
    Ok(twice_u as f64 / (2 * pairs) as f64)
}

/// The five reported metrics plus confusion counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("no samples".into()));
        }
        let confusion = Confusion::from_scores(scores, labels, threshold);
        let (precision, recall) = (confusion.precision(), confusion.recall());
        Ok(MetricsReport {
            accuracy: confusion.accuracy(),
            auc: auc(scores, labels)?,
            f1: f1_score(precision, recall),
            precision,
            recall,
            confusion,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc={:.6} auc={:.6} f1={:.6} p={:.6} r={:.6}",
            self.accuracy, self.auc, self.f1, self.precision, self.recall
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn zero_denominators() {
        let c = Confusion::from_scores(&[0.1, 0.2], &[0, 0], 0.5);
        assert_eq!((c.precision(), c.recall(), f1_score(0.0, 0.0)), (0.0, 0.0, 0.0));
        assert_eq!(c.accuracy(), 1.0);
    }

    #[test]
    fn published_f1_rows() {
        assert!((f1_score(0.70, 0.93) - 0.7988).abs() < 5e-5);
        assert!((f1_score(0.68, 0.91) - 0.778).abs() < 5e-4);
    }

    #[test]
    fn all_correct_is_perfect() {
        let r = MetricsReport::compute(&[0.9, 0.1, 0.7, 0.3], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(
            (r.accuracy, r.auc, r.f1, r.precision, r.recall),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(
            r.to_string(),
            "acc=1.000000 auc=1.000000 f1=1.000000 p=1.000000 r=1.000000"
        );
    }
}

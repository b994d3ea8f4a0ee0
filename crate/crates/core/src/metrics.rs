//! Class weights, binary cross-entropy, confusion counts, threshold metrics and ROC AUC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PROB_EPSILON;

/// Per-class loss weights; `w0` for the negative class, `w1` for the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };

    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0 > 0.0 && w1 > 0.0 && w0.is_finite() && w1.is_finite()) {
            return Err(Error::Domain(format!("class weights must be positive, got ({w0}, {w1})")));
        }
        Ok(Self { w0, w1 })
    }

    pub fn for_label(&self, label: u8) -> f64 {
        if label == 1 {
            self.w1
        } else {
            self.w0
        }
    }
}

/// `w_c = n_total / (n_classes * n_c)` for classes 0 and 1.
pub fn class_weights(counts: &BTreeMap<u8, usize>, n_total: usize, n_classes: usize) -> Result<ClassWeights> {
    if n_classes != 2 || counts.len() != 2 || !counts.contains_key(&0) || !counts.contains_key(&1) {
        return Err(Error::Domain(format!(
            "binary class weights need counts for classes 0 and 1, got {counts:?}"
        )));
    }
    if let Some((c, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Domain(format!("class {c} has no records")));
    }
    let sum: usize = counts.values().sum();
    if sum != n_total {
        return Err(Error::Domain(format!(
            "class counts sum to {sum}, expected n_total = {n_total}"
        )));
    }
    let w = |c: u8| n_total as f64 / (n_classes as f64 * counts[&c] as f64);
    ClassWeights::new(w(0), w(1))
}

/// Class weights from a list of binary labels.
pub fn class_weights_from_labels(labels: &[u8]) -> Result<ClassWeights> {
    let mut counts = BTreeMap::from([(0u8, 0usize), (1u8, 0usize)]);
    for &l in labels {
        *counts
            .get_mut(&l)
            .ok_or_else(|| Error::Domain(format!("label {l} is not binary")))? += 1;
    }
    class_weights(&counts, labels.len(), 2)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Unweighted binary cross-entropy of a single prediction.
pub fn bce(y: u8, yhat: f64) -> f64 {
    weighted_bce(y, yhat, ClassWeights::UNIT)
}

/// Class-weighted binary cross-entropy of a single prediction.
pub fn weighted_bce(y: u8, yhat: f64, w: ClassWeights) -> f64 {
    let p = clamp_prob(yhat);
    if y == 1 {
        -w.w1 * p.ln()
    } else {
        -w.w0 * (1.0 - p).ln()
    }
}

/// Mean [`bce`] over a batch.
pub fn mean_bce(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if labels.is_empty() {
        return Err(Error::Domain("mean loss of an empty batch".into()));
    }
    Ok(labels.iter().zip(scores).map(|(&y, &s)| bce(y, s)).sum::<f64>() / labels.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} labels but {b} scores")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Default decision threshold; a score equal to it is predicted positive.
pub const THRESHOLD: f64 = 0.5;

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(labels.len(), scores.len())?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0,1)")));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall and F-score. Ratios with a zero denominator are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Rates {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Rates {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f_score,
    }
}

/// Exact area under the ROC curve.
///
/// Scores are sorted once; records sharing a score form one threshold step,
/// so the result equals the Mann-Whitney statistic with ties counted as 1/2.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the trapezoid area in units of (1/n_pos) x (1/n_neg), kept integral.
    let (mut tp, mut fp, mut area2) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
    }
    Ok(area2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    /// Builds a report at [`THRESHOLD`] from scores, labels and an already computed loss.
    pub fn from_scores(loss: f64, scores: &[f64], labels: &[u8]) -> Result<Self> {
        let counts = confusion(scores, labels, THRESHOLD)?;
        let r = metrics_from_counts(&counts);
        let auc = match auc_roc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::Domain(_)) if !scores.iter().any(|s| s.is_nan()) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            loss,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f_score: r.f_score,
            auc,
            counts,
        })
    }
}

pub const CSV_HEADER: &str = "epoch,phase,split,loss,accuracy,precision,recall,f_score,auc,tp,fp,tn,fn";

/// Header of a standalone evaluation report: [`CSV_HEADER`] without epoch and phase.
pub const REPORT_HEADER: &str = "split,loss,accuracy,precision,recall,f_score,auc,tp,fp,tn,fn";

/// CSV row for [`REPORT_HEADER`]; an undefined AUC is left empty.
pub fn report_row(split: &str, r: &MetricReport) -> String {
    let auc = r.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
    format!(
        "{split},{:.6},{:.6},{:.6},{:.6},{:.6},{auc},{},{},{},{}",
        r.loss, r.accuracy, r.precision, r.recall, r.f_score, r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_
    )
}

/// CSV row for [`CSV_HEADER`].
pub fn csv_row(epoch: usize, phase: &str, split: &str, r: &MetricReport) -> String {
    format!("{epoch},{phase},{}", report_row(split, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        let w = class_weights(&BTreeMap::from([(0, 1), (1, 3)]), 4, 2).unwrap();
        assert!((w.w0 - 2.0).abs() < 1e-15 && (w.w1 - 2.0 / 3.0).abs() < 1e-15);
        let w = class_weights(&BTreeMap::from([(0, 17), (1, 17)]), 34, 2).unwrap();
        assert_eq!((w.w0, w.w1), (1.0, 1.0));
        assert!(matches!(
            class_weights(&BTreeMap::from([(0, 0), (1, 3)]), 3, 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::Domain(_))));
    }

    #[test]
    fn csv_row_leaves_undefined_auc_empty() {
        let r = MetricReport::from_scores(0.5, &[0.9, 0.8], &[1, 1]).unwrap();
        assert_eq!(r.auc, None);
        let row = csv_row(3, "head", "val", &r);
        assert_eq!(row, "3,head,val,0.500000,1.000000,1.000000,1.000000,1.000000,,2,0,0,0");
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}

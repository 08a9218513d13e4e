//! Binary classification metrics. The positive class is label 1.
//!
//! Any metric whose denominator is zero is reported as 0, and an AUC over a
//! single-class label set is reported as 0.5 inside a [`MetricsReport`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

pub fn derive_metrics(cm: &ConfusionMatrix) -> DerivedMetrics {
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    DerivedMetrics {
        accuracy: ratio(tp + tn, cm.total() as f64),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        mcc: ratio(tp * tn - fp * fn_, denom),
    }
}

/// Mann–Whitney AUC: the chance that a random positive outscores a random
/// negative, ties counting one half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined("ROC AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u128, negatives as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub roc_auc: f64,
    pub loss: f64,
}

impl MetricsReport {
    /// Scores hard predictions plus positive-class probabilities.
    pub fn evaluate(predictions: &[usize], positive_scores: &[f64], labels: &[usize], loss: f64) -> Result<Self> {
        let cm = confusion(predictions, labels)?;
        let d = derive_metrics(&cm);
        let roc_auc = match roc_auc(positive_scores, labels) {
            Ok(v) => v,
            Err(Error::Undefined(_)) => 0.5,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            confusion: cm,
            accuracy: d.accuracy,
            precision: d.precision,
            recall: d.recall,
            f1: d.f1,
            mcc: d.mcc,
            roc_auc,
            loss,
        })
    }

    /// Flat JSON object, reals to 6 decimal places.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        let c = &self.confusion;
        let _ = write!(s, "\"tp\":{},\"fp\":{},\"tn\":{},\"fn\":{}", c.tp, c.fp, c.tn, c.fn_);
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("mcc", self.mcc),
            ("roc_auc", self.roc_auc),
            ("loss", self.loss),
        ] {
            let _ = write!(s, ",\"{k}\":{}", fixed6(v));
        }
        s.push('}');
        s
    }
}

/// `{:.6}` with negative zero normalized.
pub(crate) fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

//! Confusion-matrix statistics, fold aggregates and empirical ROC AUC.
//!
//! Malignant (label 1) is the positive class throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// True malignant (true positives).
    pub tm: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tm + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tm + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("confusion matrix of zero cases".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => cm.tm += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(Error::Metric(format!("labels must be 0 or 1, got ({p}, {l})"))),
        }
    }
    Ok(cm)
}

/// Ratios derived from a confusion matrix. `None` marks a zero denominator,
/// which is not the same thing as a score of 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derived_metrics(cm: &ConfusionMatrix) -> DerivedMetrics {
    let precision = ratio(cm.tm, cm.tm + cm.fp);
    let recall = ratio(cm.tm, cm.tm + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    DerivedMetrics {
        accuracy: ratio(cm.tm + cm.tn, cm.total()),
        precision,
        recall,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        f1,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divides by `n - 1`.
    #[default]
    Sample,
    /// Divides by `n`.
    Population,
}

/// Mean and standard deviation of per-fold values. Needs at least two folds.
pub fn mean_std(values: &[f64], kind: StdKind) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Metric(format!("standard deviation needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let den = match kind {
        StdKind::Sample => n - 1,
        StdKind::Population => n,
    };
    Ok((mean, (ss / den as f64).sqrt()))
}

/// Mean fold accuracy (in percent) with the sample standard deviation.
pub fn mean_acc_std(fold_accuracies: &[f64]) -> Result<(f64, f64)> {
    mean_std(fold_accuracies, StdKind::Sample)
}

/// Mann-Whitney estimate of ROC AUC: the share of (malignant, benign) pairs
/// ranked correctly, ties counting one half.
pub fn empirical_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs at least one case of each class".into()));
    }
    // Walk groups of equal scores in ascending order. Each positive beats every
    // negative seen in earlier groups and ties with the ones in its own group.
    let mut neg_below = 0.0;
    let mut credit = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        let neg = (j - i) as f64 - pos;
        credit += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        i = j;
    }
    Ok(credit / (n_pos as f64 * n_neg as f64))
}

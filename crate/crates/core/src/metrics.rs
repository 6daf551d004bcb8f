//! Regression and binned-classification metrics for sentiment scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels within this distance of zero count as neutral for Acc-3.
pub const NEUTRAL_LABEL_TOL: f64 = 1e-6;
/// Predictions with magnitude at most this are binned neutral for Acc-3.
pub const NEUTRAL_PRED_BOUND: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiClass {
    /// Seven integer bins over [-3, 3].
    Acc7,
    /// Negative / neutral / positive over [-1, 1].
    Acc3,
}

impl MultiClass {
    /// Acc-3 for a `[-1, 1]` score range, Acc-7 otherwise.
    pub fn for_range(range: (f64, f64)) -> Self {
        if range.0 >= -1.0 && range.1 <= 1.0 {
            MultiClass::Acc3
        } else {
            MultiClass::Acc7
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MultiClass::Acc7 => "Acc-7",
            MultiClass::Acc3 => "Acc-3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub corr: f64,
    /// Set when predictions or labels are constant and `corr` was forced to 0.
    pub corr_undefined: bool,
    pub multiclass: MultiClass,
    /// Acc-7 or Acc-3, per `multiclass`.
    pub acc_multi: f64,
    pub acc2_nn: f64,
    pub f1_nn: f64,
    pub acc2_np: f64,
    pub f1_np: f64,
    /// Samples with a nonzero label, the population of the NP figures.
    pub n_np: usize,
}

/// Clamp to [-3, 3] and round half away from zero.
pub fn bin7(x: f64) -> i32 {
    x.clamp(-3.0, 3.0).round() as i32
}

pub fn bin3_label(y: f64) -> i32 {
    if y.abs() <= NEUTRAL_LABEL_TOL {
        0
    } else if y < 0.0 {
        -1
    } else {
        1
    }
}

pub fn bin3_pred(p: f64) -> i32 {
    if p < -NEUTRAL_PRED_BOUND {
        -1
    } else if p > NEUTRAL_PRED_BOUND {
        1
    } else {
        0
    }
}

pub fn mae(preds: &[f64], labels: &[f64]) -> f64 {
    preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64
}

/// Pearson correlation, or `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Support-weighted mean of per-class F1 over the classes present in `truth`.
pub fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let support = truth.iter().filter(|&&t| t == class).count();
        if support == 0 {
            continue;
        }
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == class && t == class).count() as f64;
        let pred_pos = pred.iter().filter(|&&p| p == class).count() as f64;
        let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1 * support as f64;
    }
    total / truth.len() as f64
}

pub fn compute_metrics(preds: &[f64], labels: &[f64], score_range: (f64, f64)) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metrics need equal nonempty lengths, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let corr = pearson(preds, labels);
    let multiclass = MultiClass::for_range(score_range);
    let acc_multi = match multiclass {
        MultiClass::Acc7 => accuracy(
            &preds.iter().map(|&p| bin7(p)).collect::<Vec<_>>(),
            &labels.iter().map(|&y| bin7(y)).collect::<Vec<_>>(),
        ),
        MultiClass::Acc3 => accuracy(
            &preds.iter().map(|&p| bin3_pred(p)).collect::<Vec<_>>(),
            &labels.iter().map(|&y| bin3_label(y)).collect::<Vec<_>>(),
        ),
    };

    let nn_pred: Vec<bool> = preds.iter().map(|&p| p >= 0.0).collect();
    let nn_true: Vec<bool> = labels.iter().map(|&y| y >= 0.0).collect();
    let (np_pred, np_true): (Vec<bool>, Vec<bool>) = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| (p > 0.0, y > 0.0))
        .unzip();

    Ok(MetricReport {
        n: preds.len(),
        mae: mae(preds, labels),
        corr: corr.unwrap_or(0.0),
        corr_undefined: corr.is_none(),
        multiclass,
        acc_multi,
        acc2_nn: accuracy(&nn_pred, &nn_true),
        f1_nn: weighted_f1(&nn_pred, &nn_true),
        acc2_np: accuracy(&np_pred, &np_true),
        f1_np: weighted_f1(&np_pred, &np_true),
        n_np: np_true.len(),
    })
}

//! Evaluation metrics: hard Dice overlap, ROC AUC, average precision,
//! Youden-index threshold selection and thresholded confusion metrics.
//!
//! Conventions that matter and are pinned by tests:
//! * AUC uses the probabilistic definition — a tied positive/negative pair
//!   counts 1/2 — computed via midranks, which coincides with the
//!   trapezoidal area under the tie-grouped ROC curve.
//! * Average precision is the step-function sum `Σ (R_k - R_{k-1}) P_k`
//!   over descending score thresholds (no interpolation).
//! * Decision thresholds classify positive on `score > t` (a score exactly
//!   at the threshold is called negative), and the Youden threshold is
//!   chosen among midpoints of adjacent distinct scores on *validation*
//!   data, never on test data.
//! * Dice of two empty masks is 1.0 by convention.
//! * Metrics that are undefined on one-class inputs return an error instead
//!   of a silent default.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hard Dice overlap for one class label between two index masks.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_score",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        let pa = a == class;
        let gb = b == class;
        p += pa as usize;
        g += gb as usize;
        inter += (pa && gb) as usize;
    }
    if p + g == 0 {
        // Both masks empty for this class: perfect agreement.
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Dice after merging the given classes into one foreground label.
pub fn merged_dice(pred: &[u8], gt: &[u8], classes: &[u8]) -> Result<f64> {
    let member = |v: u8| classes.contains(&v) as u8;
    let pm: Vec<u8> = pred.iter().map(|&v| member(v)).collect();
    let gm: Vec<u8> = gt.iter().map(|&v| member(v)).collect();
    dice_score(&pm, &gm, 1)
}

/// Per-class Dice plus the summary values the reports use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceSummary {
    pub per_class: Vec<f64>,
    pub mean: f64,
    /// Dice of ground-glass + other pathology treated as one class.
    pub merged_pathology: f64,
    /// Dice of the healthy-lung class.
    pub healthy: f64,
}

pub fn dice_summary(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<DiceSummary> {
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| dice_score(pred, gt, c as u8))
        .collect::<Result<_>>()?;
    let mean = per_class.iter().sum::<f64>() / n_classes.max(1) as f64;
    let merged_pathology = merged_dice(pred, gt, &[2, 3])?;
    Ok(DiceSummary {
        healthy: per_class.get(1).copied().unwrap_or(f64::NAN),
        per_class,
        mean,
        merged_pathology,
    })
}

fn check_two_classes(labels: &[bool], what: &'static str) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate {
            what,
            reason: format!("{pos} positives and {neg} negatives"),
        });
    }
    Ok((pos, neg))
}

/// Area under the ROC curve with tied pairs counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let (pos, neg) = check_two_classes(labels, "roc_auc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks over tie groups, then the Mann-Whitney statistic.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Step-function average precision over descending score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let (pos, _) = check_two_classes(labels, "average_precision")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // Tied scores enter the ranking together: one threshold step.
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += labels[order[j]] as usize;
            fp += !labels[order[j]] as usize;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Decision threshold chosen by maximising the Youden index
/// `J = sensitivity + specificity - 1` over midpoints of adjacent distinct
/// scores.  Returns `(threshold, degenerate)`; `degenerate` is set when all
/// scores coincide and no midpoint exists (the common value is returned and
/// every sample classifies negative under `score > t`).
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, bool)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "youden_threshold",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let (pos, neg) = check_two_classes(labels, "youden_threshold")?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() == 1 {
        log::warn!("youden_threshold: all scores equal ({}), threshold degenerate", distinct[0]);
        return Ok((distinct[0], true));
    }
    let candidates: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let mut best_t = candidates[0];
    let mut best_j = f64::NEG_INFINITY;
    for &t in &candidates {
        let mut tp = 0usize;
        let mut tn = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if l && s > t {
                tp += 1;
            }
            if !l && s <= t {
                tn += 1;
            }
        }
        let j = tp as f64 / pos as f64 + tn as f64 / neg as f64 - 1.0;
        // Strictly-greater keeps the smallest threshold among ties.
        if j > best_j {
            best_j = j;
            best_t = t;
        }
    }
    Ok((best_t, false))
}

/// Confusion-matrix metrics at a fixed threshold (positive iff `score > t`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
}

pub fn thresholded_metrics(scores: &[f64], labels: &[bool], t: f64) -> Result<ThresholdMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "thresholded_metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    check_two_classes(labels, "thresholded_metrics")?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s > t) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(ThresholdMetrics {
        tp,
        fp,
        tn,
        fn_,
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        f1,
    })
}

/// Full binary evaluation: ranking metrics on the test scores plus
/// confusion metrics at the Youden threshold fitted on validation scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auc: f64,
    pub ap: f64,
    pub threshold: f64,
    pub threshold_degenerate: bool,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
}

pub fn evaluate_binary(
    val_scores: &[f64],
    val_labels: &[bool],
    test_scores: &[f64],
    test_labels: &[bool],
) -> Result<BinaryMetrics> {
    let (threshold, threshold_degenerate) = youden_threshold(val_scores, val_labels)?;
    let auc = roc_auc(test_scores, test_labels)?;
    let ap = average_precision(test_scores, test_labels)?;
    let tm = thresholded_metrics(test_scores, test_labels, threshold)?;
    Ok(BinaryMetrics {
        auc,
        ap,
        threshold,
        threshold_degenerate,
        sensitivity: tm.sensitivity,
        specificity: tm.specificity,
        balanced_accuracy: tm.balanced_accuracy,
        f1: tm.f1,
    })
}

/// Mean and (population) standard deviation of a sample of run metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

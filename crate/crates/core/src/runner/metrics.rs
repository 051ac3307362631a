//! Evaluation metrics.

use std::collections::BTreeSet;

use super::{Result, RunError};

/// ROC AUC as the Mann-Whitney rank statistic; tied scores get midranks.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(RunError::EmptySplit(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(RunError::Config("NaN score passed to AUC".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based: the tie block i..=j shares (i + j) / 2 + 1
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn f1_for(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return if fp + fn_ == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 of the positive class (label 1).
pub fn binary_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(f1_for(pred, truth, 1))
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the predictions or the ground truth.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    Ok(classes.iter().map(|&c| f1_for(pred, truth, c)).sum::<f64>() / classes.len() as f64)
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(RunError::EmptySplit("no examples to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(RunError::Config(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &ndarray::Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{input_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

fn check(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(input_err!("{} scores for {} labels", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(input_err!("no predictions to evaluate"));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(input_err!("NaN score"));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("ranking metrics need both classes".into()));
    }
    Ok((pos, neg))
}

/// Macro-averaged recall and F1 over both classes; `p ≥ threshold` predicts positive.
///
/// A class absent from both labels and predictions contributes recall 0 and F1 0.
pub fn macro_recall_f1(probs: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check(probs, labels)?;
    let mut confusion = [[0usize; 2]; 2]; // [actual][predicted]
    for (&p, &l) in probs.iter().zip(labels) {
        confusion[usize::from(l != 0)][usize::from(p >= threshold)] += 1;
    }
    let (mut recall, mut f1) = (0.0, 0.0);
    for c in 0..2 {
        let tp = confusion[c][c] as f64;
        let fn_ = confusion[c][1 - c] as f64;
        let fp = confusion[1 - c][c] as f64;
        if tp + fn_ > 0.0 {
            recall += tp / (tp + fn_);
        }
        if 2.0 * tp + fp + fn_ > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    Ok((recall / 2.0, f1 / 2.0))
}

/// Mann–Whitney AUROC with midranks for ties.
pub fn auroc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check(probs, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && probs[order[end]] == probs[order[start]] {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&i| labels[i] != 0).count() as f64;
        start = end;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision with step interpolation; tied scores enter together.
pub fn average_precision(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check(probs, labels)?;
    let (pos, _) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && probs[order[end]] == probs[order[start]] {
            end += 1;
        }
        let hits = order[start..end].iter().filter(|&&i| labels[i] != 0).count();
        tp += hits;
        seen += end - start;
        ap += hits as f64 / pos as f64 * (tp as f64 / seen as f64);
        start = end;
    }
    Ok(ap)
}

/// All four metrics at `threshold`.
pub fn evaluate(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    let (recall, f1) = macro_recall_f1(probs, labels, threshold)?;
    Ok(Metrics { recall, f1, auroc: auroc(probs, labels)?, auprc: average_precision(probs, labels)? })
}

/// Mean with a two-sided Student-t interval, clamped to `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(values: &[f64], level: f64, lo: f64, hi: f64) -> Result<Summary> {
    if values.is_empty() {
        return Err(input_err!("nothing to summarise"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(Summary { mean, ci_low: mean, ci_high: mean });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| input_err!("t distribution: {e}"))?
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * (var / n).sqrt();
    Ok(Summary { mean, ci_low: (mean - half).clamp(lo, hi), ci_high: (mean + half).clamp(lo, hi) })
}

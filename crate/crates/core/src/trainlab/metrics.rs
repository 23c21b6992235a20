use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Row-wise argmax of a `[n, k]` score matrix; ties go to the lower index.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Binary AUROC as the Mann–Whitney statistic
/// `P(score_pos > score_neg) + ½·P(tie)`, via average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o]).count() as u128;
        rank_sum2 += pos_in_group * (i as u128 + 1 + j as u128 + 1);
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Unweighted mean of one-vs-rest AUROCs over `k` classes; `probs` is `[n, k]`.
pub fn auroc_macro(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    if k < 2 || probs.len() != labels.len() * k {
        return Err(Error::Metric(format!("score matrix {} does not fit {} rows × {k}", probs.len(), labels.len())));
    }
    if k == 2 {
        let s: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&s, &l);
    }
    let mut total = 0.0;
    for c in 0..k {
        let s: Vec<f64> = probs.chunks(k).map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total +=
            auroc(&s, &l).map_err(|_| Error::Metric(format!("class {c} is absent or alone; macro AUROC undefined")))?;
    }
    Ok(total / k as f64)
}

/// Metrics of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    /// Absent when some class is missing from the split.
    pub auroc: Option<f64>,
    pub loss: f64,
}

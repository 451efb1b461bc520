//! Evaluation metrics on plain slices.

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// sharing their average rank.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.iter().filter(|&&y| y == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Metric(format!("{} predictions, {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean over queries of AP@K with denominator `min(|GT|, K)`. Queries with
/// an empty ground truth are skipped.
pub fn map_at_k(ranked: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metric("K must be at least 1".into()));
    }
    if ranked.len() != truth.len() {
        return Err(Error::Metric(format!("{} rankings, {} ground truths", ranked.len(), truth.len())));
    }
    let mut total = 0.0;
    let mut queries = 0usize;
    for (r, gt) in ranked.iter().zip(truth) {
        if gt.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, id) in r.iter().take(k).enumerate() {
            if gt.contains(id) {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / gt.len().min(k) as f64;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::Metric("every query has an empty ground truth".into()));
    }
    Ok(total / queries as f64)
}

//! Ranking and regression metrics.

use std::cmp::Ordering;

/// ROC-AUC as the normalised Mann–Whitney statistic with average ranks for
/// ties. `None` when either class is absent.
pub fn roc_auc(labels: &[f64], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores must align");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(y, _)| **y > 0.5).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "predictions and targets must align");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Candidate scores of one source entity and which candidates are true
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingQuery {
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

/// Average precision of the top `k` by descending score (ties keep
/// candidate order), normalised by `min(k, #relevant)`. Zero without
/// relevant candidates.
pub fn average_precision_at_k(q: &RankingQuery, k: usize) -> f64 {
    let total = q.relevant.iter().filter(|&&r| r).count();
    if total == 0 || k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..q.scores.len()).collect();
    order.sort_by(|&a, &b| q.scores[b].partial_cmp(&q.scores[a]).unwrap_or(Ordering::Equal));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (i, &c) in order.iter().take(k).enumerate() {
        if q.relevant[c] {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total.min(k) as f64
}

pub fn map_at_k(queries: &[RankingQuery], k: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries.iter().map(|q| average_precision_at_k(q, k)).sum::<f64>() / queries.len() as f64
}

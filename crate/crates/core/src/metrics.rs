//! Rank-based ROC AUC and class-wise / support-weighted F1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROC AUC as the Mann–Whitney statistic: the fraction of (positive, negative)
/// pairs where the positive scores higher, ties counting one half.
///
/// Computed from mid-ranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum keeps mid-ranks integral
    let mut twice_rank_sum_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum_pos += twice_mid * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    // 2U = 2R - p(p+1)
    let twice_u = twice_rank_sum_pos - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class_f1: BTreeMap<u32, f64>,
    pub weighted_f1: f64,
    pub support: BTreeMap<u32, usize>,
}

pub fn f1_report(predictions: &[u32], labels: &[u32], classes: &[u32]) -> Result<F1Report> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("F1 needs at least one sample".into()));
    }
    let class_set: BTreeSet<u32> = classes.iter().copied().collect();
    for &c in predictions.iter().chain(labels) {
        if !class_set.contains(&c) {
            return Err(Error::UnknownClass(c));
        }
    }

    let mut per_class_f1 = BTreeMap::new();
    let mut support = BTreeMap::new();
    let mut weighted = 0.0;
    for &c in &class_set {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let n_c = tp + fn_;
        weighted += n_c as f64 * f1;
        per_class_f1.insert(c, f1);
        support.insert(c, n_c);
    }
    Ok(F1Report { per_class_f1, weighted_f1: weighted / labels.len() as f64, support })
}

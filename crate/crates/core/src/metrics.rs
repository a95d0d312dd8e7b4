//! Ranking metrics for binary anomaly labels (1 = anomaly, positive class).

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(alloc::format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(alloc::format!(
            "both classes are required, got {pos} anomalies and {neg} normals"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// AUROC as the exact fraction `numerator / denominator`, where the
/// numerator counts every (anomaly, normal) pair twice when the anomaly
/// scores higher and once on a tie, and the denominator is `2 * P * N`.
pub fn auroc_fraction(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = ascending(scores);
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok((twice, 2 * pos * neg))
}

/// Probability that a random anomaly outscores a random normal sample, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (num, den) = auroc_fraction(scores, labels)?;
    Ok(num as f64 / den as f64)
}

/// One ROC operating point for the rule "anomaly iff score >= threshold".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Operating points at every distinct score, ascending, followed by a point
/// above the maximum where nothing is flagged.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = ascending(scores);
    let (p, n) = (pos as f64, neg as f64);
    let mut points = Vec::new();
    // counts strictly below the current threshold
    let (mut pos_below, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(RocPoint {
            threshold: t,
            fpr: (neg - neg_below) as f64 / n,
            fnr: pos_below as f64 / p,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] != 0 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::INFINITY, fpr: 0.0, fnr: 1.0 });
    Ok(points)
}

/// Equal error rate: the point where false-positive and false-negative
/// rates cross, linearly interpolated between the two bracketing distinct
/// thresholds.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(eer_from_points(&roc_points(scores, labels)?))
}

/// EER of an ascending-threshold operating-point sequence that starts with
/// `fpr >= fnr` and ends with `fpr <= fnr`.
pub fn eer_from_points(points: &[RocPoint]) -> f64 {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.fpr - a.fnr, b.fpr - b.fnr);
        if da == 0.0 {
            return a.fpr;
        }
        if da > 0.0 && db <= 0.0 {
            let t = da / (da - db);
            return a.fpr + t * (b.fpr - a.fpr);
        }
    }
    points.last().map_or(f64::NAN, |p| p.fpr)
}

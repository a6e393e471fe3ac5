//! Ranked-retrieval metrics for multi-label predictions.

use serde::{Deserialize, Serialize};

/// Precision and recall after admitting every item scored at or above a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall at each distinct score threshold, highest first.
/// Tied scores enter the ranking together.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<PrPoint> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    points
}

/// All-points interpolated average precision; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut points = pr_curve(scores, labels);
    if points.is_empty() {
        return None;
    }
    for k in (0..points.len() - 1).rev() {
        points[k].precision = points[k].precision.max(points[k + 1].precision);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in &points {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Per-class AP; `None` for a class with no positive example.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over the classes that have an AP.
    pub map: f64,
    pub prevalence: Vec<f64>,
    pub examples: usize,
}

/// Per-class AP and mAP. `scores[i][c]` and `labels[i][c]` per example `i`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> MapReport {
    let classes = scores.first().map_or(0, Vec::len);
    let mut per_class_ap = Vec::with_capacity(classes);
    let mut prevalence = Vec::with_capacity(classes);
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        prevalence.push(l.iter().filter(|&&x| x).count() as f64 / l.len().max(1) as f64);
        per_class_ap.push(average_precision(&s, &l));
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapReport {
        per_class_ap,
        map,
        prevalence,
        examples: scores.len(),
    }
}

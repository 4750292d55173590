//! IoU, greedy matching and 101-point interpolated AP at IoU 0.5.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, DetectionSet};

pub const AP_IOU: f64 = 0.5;
pub const RECALL_POINTS: usize = 101;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from the same corner differences, so iou(a, a) is exactly 1.
    let area = |r: &BBox| (r.x2() - r.x) * (r.y2() - r.y);
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Match flags for detections already sorted by descending score. Each
/// detection takes the unmatched same-class ground truth of highest IoU
/// (first index on ties); it is a true positive iff that IoU reaches
/// `iou_thresh`.
pub fn greedy_match(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.cls != d.bbox.cls {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

/// Precision/recall after each detection of one class, in non-increasing
/// score order across all images.
pub fn pr_curve(all_dets: &[DetectionSet], all_gts: &[Vec<BBox>], cls: u32) -> Vec<PrPoint> {
    let npos = all_gts.iter().flatten().filter(|g| g.cls == cls).count();
    // (score, image, rank within image) so the global order is stable.
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (dets, gts)) in all_dets.iter().zip(all_gts).enumerate() {
        let mut own: Vec<Detection> = dets.iter().filter(|d| d.bbox.cls == cls).copied().collect();
        crate::types::sort_detections(&mut own);
        let gts: Vec<BBox> = gts.iter().filter(|g| g.cls == cls).copied().collect();
        let flags = greedy_match(&own, &gts, AP_IOU);
        for (rank, (d, tp)) in own.iter().zip(flags).enumerate() {
            scored.push((d.score, img, rank, tp));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp) = (0usize, 0usize);
    scored
        .iter()
        .map(|&(score, _, _, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: if npos == 0 { 0.0 } else { tp as f64 / npos as f64 },
                precision: tp as f64 / (tp + fp) as f64,
                score_threshold: score,
            }
        })
        .collect()
}

/// 101-point interpolated AP of one PR curve.
pub fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    // Precision envelope from the right: max precision at recall >= r.
    let mut env: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < env.len() && env[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < env.len() {
            sum += env[k].1;
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP@50 averaged over the classes present in the ground truth.
pub fn average_precision_at_50(all_dets: &[DetectionSet], all_gts: &[Vec<BBox>]) -> Result<f64> {
    if all_dets.len() != all_gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection sets for {} images",
            all_dets.len(),
            all_gts.len()
        )));
    }
    let classes: BTreeSet<u32> = all_gts.iter().flatten().map(|g| g.cls).collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| interpolated_ap(&pr_curve(all_dets, all_gts, c)))
        .sum();
    Ok(total / classes.len() as f64)
}

/// Arithmetic mean and sample standard deviation (n - 1), 0 for one value.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

//! Detection quality metrics.
//!
//! 101-point interpolated average precision, swept over IoU thresholds
//! 0.50:0.05:0.95 and macro-averaged over classes. Matching is greedy
//! by descending score (ties keep insertion order), class aware, and
//! strictly per image. Classes without any ground truth are skipped
//! rather than scored as zero.

use crate::detector::{predict, DetectorConfig, DetectorParams};
use crate::scene::{BoxXYXY, ImageSample, Instance};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const IOU_THRESHOLDS: [f64; 10] = [
    0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BoxXYXY,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalOpts {
    /// Detections under this score never leave the detector.
    pub score_thresh: f64,
    /// Same-class detections overlapping a kept one more than this are
    /// suppressed.
    pub nms_iou: f64,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts {
            score_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Macro mean over classes of the mean AP across the IoU sweep.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Threshold-averaged AP per class (classes with ground truth only).
    pub per_class: BTreeMap<usize, f64>,
}

/// Per-class greedy non-maximum suppression. Keeps the highest-scoring
/// box of each overlapping cluster; a candidate survives while its IoU
/// with every kept box of its class stays at or below the threshold.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let survives = kept
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thresh);
        if survives {
            kept.push(d.clone());
        }
    }
    kept
}

/// AP for one class at one IoU threshold over per-image (detections,
/// ground truth) pools. None when the class has no ground truth.
fn class_ap(
    pairs: &[(Vec<Detection>, Vec<Instance>)],
    class_id: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let gt_per_image: Vec<Vec<&Instance>> = pairs
        .iter()
        .map(|(_, gts)| gts.iter().filter(|g| g.class_id == class_id).collect())
        .collect();
    let total_gt: usize = gt_per_image.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return None;
    }

    let mut dets: Vec<(usize, &Detection)> = Vec::new();
    for (img, (ds, _)) in pairs.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class_id) {
            dets.push((img, d));
        }
    }
    // stable sort: equal scores keep (image, insertion) order
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = gt_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for (img, det) in &dets {
        let gts = &gt_per_image[*img];
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let ov = det.bbox.iou(&gt.bbox);
            // strict > keeps the lowest index on ties
            if ov > best_iou {
                best_iou = ov;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best_iou >= iou_thresh => {
                matched[*img][gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }

    // precision/recall at every rank, then 101-point interpolation
    let n = tp_flags.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tps = 0usize;
    for (k, &tp) in tp_flags.iter().enumerate() {
        tps += tp as usize;
        precisions.push(tps as f64 / (k + 1) as f64);
        recalls.push(tps as f64 / total_gt as f64);
    }
    // running max from the right: interpolated precision
    let mut interp = precisions.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        interp[k] = interp[k].max(interp[k + 1]);
    }
    let mut sum = 0.0;
    for ri in 0..=100 {
        let r = ri as f64 / 100.0;
        // first rank reaching recall r (recalls are nondecreasing)
        let p = recalls
            .iter()
            .position(|&rec| rec >= r)
            .map_or(0.0, |k| interp[k]);
        sum += p;
    }
    Some(sum / 101.0)
}

/// Score per-image detection pools against their ground truth.
pub fn evaluate_detections(
    pairs: &[(Vec<Detection>, Vec<Instance>)],
    classes: usize,
) -> EvalResult {
    let mut per_class = BTreeMap::new();
    let mut means = Vec::new();
    let mut ap50s = Vec::new();
    let mut ap75s = Vec::new();
    for c in 0..classes {
        let aps: Option<Vec<f64>> = IOU_THRESHOLDS
            .iter()
            .map(|&t| class_ap(pairs, c, t))
            .collect();
        let aps = match aps {
            Some(v) => v,
            None => continue,
        };
        let mean = aps.iter().sum::<f64>() / aps.len() as f64;
        per_class.insert(c, mean);
        means.push(mean);
        ap50s.push(aps[0]);
        ap75s.push(aps[5]);
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    EvalResult {
        ap: avg(&means),
        ap50: avg(&ap50s),
        ap75: avg(&ap75s),
        per_class,
    }
}

/// Single-pool AP at one IoU threshold, macro-averaged over the classes
/// present in the ground truth.
pub fn average_precision(dets: &[Detection], gts: &[Instance], iou_thresh: f64) -> f64 {
    let pairs = vec![(dets.to_vec(), gts.to_vec())];
    let mut aps = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for g in gts {
        if seen.insert(g.class_id) {
            if let Some(ap) = class_ap(&pairs, g.class_id, iou_thresh) {
                aps.push(ap);
            }
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Run the detector over a held-out set and score it.
pub fn evaluate_model(
    params: &DetectorParams,
    samples: &[ImageSample],
    cfg: &DetectorConfig,
    opts: &EvalOpts,
) -> EvalResult {
    let pairs: Vec<(Vec<Detection>, Vec<Instance>)> = samples
        .iter()
        .map(|s| (predict(params, &s.image, cfg, opts), s.instances.clone()))
        .collect();
    evaluate_detections(&pairs, cfg.classes)
}

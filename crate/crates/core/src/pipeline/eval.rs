//! Mean average precision with 101-point interpolation, plus a brute-force
//! variant that scans every rank cut-off directly (test oracle).

use std::collections::BTreeSet;

use crate::alignment::PseudoLabel;
use crate::detector::{iou_xywh, BoxLabel, DetectionSet};
use crate::error::{Error, Result};

pub const MAP_IOU_THRESHOLD: f64 = 0.5;

/// One scored box in evaluation form.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDetection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// Raw model output as ranked boxes: per query the argmax class with its
/// probability; background predictions drop out.
pub fn rank_detections(set: &DetectionSet) -> Vec<RankedDetection> {
    let background = set.background_class();
    set.top_classes()
        .into_iter()
        .enumerate()
        .filter(|&(_, (class, _))| class != background)
        .map(|(q, (class_id, confidence))| RankedDetection {
            class_id,
            confidence,
            bbox: set.box_of(q),
        })
        .collect()
}

pub fn rank_pseudo_labels(labels: &[PseudoLabel]) -> Vec<RankedDetection> {
    labels
        .iter()
        .map(|p| RankedDetection {
            class_id: p.label.class_id,
            confidence: p.confidence,
            bbox: p.label.xywh(),
        })
        .collect()
}

/// Cumulative precision/recall after greedy confidence-ranked matching of
/// one class across all images.
fn pr_curve(
    class: usize,
    predictions: &[Vec<RankedDetection>],
    truth: &[Vec<BoxLabel>],
    iou_threshold: f64,
) -> (Vec<f64>, Vec<f64>) {
    // (confidence, image, insertion order) — the trailing keys pin tie order.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, preds) in predictions.iter().enumerate() {
        for (k, d) in preds.iter().enumerate() {
            if d.class_id == class {
                dets.push((d.confidence, img, k));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite confidences")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let n_truth: usize =
        truth.iter().map(|t| t.iter().filter(|l| l.class_id == class).count()).sum();
    let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(dets.len());
    let mut recalls = Vec::with_capacity(dets.len());
    for (rank, &(_, img, k)) in dets.iter().enumerate() {
        let bbox = predictions[img][k].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truth[img].iter().enumerate() {
            if t.class_id != class || used[img][ti] {
                continue;
            }
            let iou = iou_xywh(bbox, t.xywh());
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        if let Some((ti, _)) = best {
            used[img][ti] = true;
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(if n_truth == 0 { 0.0 } else { tp as f64 / n_truth as f64 });
    }
    (precisions, recalls)
}

const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP via a suffix-maximum sweep: recall is
/// non-decreasing with rank, so the cut-offs reaching recall >= r form a
/// suffix.
fn average_precision(precisions: &[f64], recalls: &[f64]) -> f64 {
    let n = precisions.len();
    let mut suffix_max = vec![0.0; n];
    let mut running = f64::NEG_INFINITY;
    for k in (0..n).rev() {
        running = running.max(precisions[k]);
        suffix_max[k] = running;
    }
    let mut total = 0.0;
    let mut k = 0;
    for point in 0..RECALL_POINTS {
        let r = point as f64 / (RECALL_POINTS - 1) as f64;
        while k < n && recalls[k] < r {
            k += 1;
        }
        if k < n {
            total += suffix_max[k];
        }
    }
    total / RECALL_POINTS as f64
}

/// Same 101 points, each evaluated by scanning every cut-off.
fn average_precision_bruteforce(precisions: &[f64], recalls: &[f64]) -> f64 {
    let mut total = 0.0;
    for point in 0..RECALL_POINTS {
        let r = point as f64 / (RECALL_POINTS - 1) as f64;
        let best = precisions
            .iter()
            .zip(recalls)
            .filter(|&(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(f64::NEG_INFINITY, f64::max);
        if best.is_finite() {
            total += best;
        }
    }
    total / RECALL_POINTS as f64
}

fn map_impl(
    predictions: &[Vec<RankedDetection>],
    truth: &[Vec<BoxLabel>],
    iou_threshold: f64,
    ap: fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction lists vs {} truth lists",
            predictions.len(),
            truth.len()
        )));
    }
    let classes: BTreeSet<usize> =
        truth.iter().flatten().map(|l| l.class_id).collect();
    if classes.is_empty() {
        return Err(Error::InvalidInput(
            "mAP is undefined with no ground-truth objects of any class".into(),
        ));
    }
    let mut total = 0.0;
    for &class in &classes {
        let (p, r) = pr_curve(class, predictions, truth, iou_threshold);
        total += ap(&p, &r);
    }
    Ok(100.0 * total / classes.len() as f64)
}

/// Class-mean AP on the 0-100 scale over the classes present in the truth.
pub fn evaluate_map(
    predictions: &[Vec<RankedDetection>],
    truth: &[Vec<BoxLabel>],
    iou_threshold: f64,
) -> Result<f64> {
    map_impl(predictions, truth, iou_threshold, average_precision)
}

/// Reference implementation enumerating all rank cut-offs per recall point.
pub fn evaluate_map_bruteforce(
    predictions: &[Vec<RankedDetection>],
    truth: &[Vec<BoxLabel>],
    iou_threshold: f64,
) -> Result<f64> {
    map_impl(predictions, truth, iou_threshold, average_precision_bruteforce)
}

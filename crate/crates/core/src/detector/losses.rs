//! Box geometry and the supervised detection loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

use super::matching::Assignment;
use super::model::DetectionVars;
use super::BoxLabel;

/// Term weights shared by matching costs and the training loss. `background`
/// down-weights the background class inside the classification term only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionLossWeights {
    pub class: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub background: f64,
}

impl Default for DetectionLossWeights {
    fn default() -> Self {
        DetectionLossWeights { class: 1.0, box_l1: 5.0, giou: 2.0, background: 0.1 }
    }
}

fn corners(b: [f64; 4]) -> (f64, f64, f64, f64) {
    (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

/// Intersection-over-union of two `(cx, cy, w, h)` boxes. Areas derive from
/// the same corner arithmetic as the overlap so identical boxes score
/// exactly 1.0.
pub fn iou_xywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. Ranges over (-1, 1].
pub fn giou_xywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclose = ew * eh;
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}

/// Tape-level GIoU column `[m x 1]` between two `[m x 4]` cxcywh matrices.
/// Box widths/heights must be strictly positive so the union never vanishes.
pub fn giou_column(t: &mut Tape, a: Var, b: Var) -> Var {
    let m = t.value(a).rows;
    assert_eq!(t.value(a).cols, 4);
    assert_eq!(t.value(b).rows, m);
    assert_eq!(t.value(b).cols, 4);

    let split = |t: &mut Tape, v: Var| {
        let cx = t.slice_cols(v, 0, 1);
        let cy = t.slice_cols(v, 1, 2);
        let w = t.slice_cols(v, 2, 3);
        let h = t.slice_cols(v, 3, 4);
        let hw = t.scale(w, 0.5);
        let hh = t.scale(h, 0.5);
        let x1 = t.sub(cx, hw);
        let x2 = t.add(cx, hw);
        let y1 = t.sub(cy, hh);
        let y2 = t.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = split(t, a);
    let (bx1, by1, bx2, by2, bw, bh) = split(t, b);

    let ix1 = t.max_elem(ax1, bx1);
    let iy1 = t.max_elem(ay1, by1);
    let ix2 = t.min_elem(ax2, bx2);
    let iy2 = t.min_elem(ay2, by2);
    let iwd = t.sub(ix2, ix1);
    let iw = t.relu(iwd);
    let ihd = t.sub(iy2, iy1);
    let ih = t.relu(ihd);
    let inter = t.mul(iw, ih);

    let area_a = t.mul(aw, ah);
    let area_b = t.mul(bw, bh);
    let areas = t.add(area_a, area_b);
    let union = t.sub(areas, inter);

    let ex1 = t.min_elem(ax1, bx1);
    let ey1 = t.min_elem(ay1, by1);
    let ex2 = t.max_elem(ax2, bx2);
    let ey2 = t.max_elem(ay2, by2);
    let ew = t.sub(ex2, ex1);
    let eh = t.sub(ey2, ey1);
    let enclose = t.mul(ew, eh);

    let iou = t.div(inter, union);
    let slack = t.sub(enclose, union);
    let penalty = t.div(slack, enclose);
    t.sub(iou, penalty)
}

/// Supervised detection loss: weighted class cross-entropy over every query
/// (unmatched queries learn the background class) plus L1 and GIoU terms on
/// the matched boxes, each normalized by the number of matched pairs.
pub fn detection_loss(
    t: &mut Tape,
    predictions: &DetectionVars,
    targets: &[BoxLabel],
    assignment: &Assignment,
    weights: &DetectionLossWeights,
) -> Result<Var> {
    let n_queries = t.value(predictions.class_logits).rows;
    let n_classes = t.value(predictions.class_logits).cols - 1;
    if t.value(predictions.boxes).rows != n_queries {
        return Err(Error::InvalidInput("logits and boxes disagree on query count".into()));
    }
    if !assignment.is_valid_for(n_queries, targets.len()) {
        return Err(Error::InvalidInput("assignment inconsistent with predictions/targets".into()));
    }
    for label in targets {
        if !label.is_valid(n_classes) {
            return Err(Error::InvalidInput(format!("invalid target label {label:?}")));
        }
    }

    let mut class_targets = vec![n_classes; n_queries];
    for &(q, ti) in &assignment.pairs {
        class_targets[ti_query_guard(q, n_queries)] = targets[ti].class_id;
    }
    let mut class_weights = vec![1.0; n_classes + 1];
    class_weights[n_classes] = weights.background;
    let ce = t.cross_entropy_rows(predictions.class_logits, &class_targets, Some(&class_weights));
    let mut loss = t.scale(ce, weights.class);

    if !assignment.pairs.is_empty() {
        let m = assignment.pairs.len();
        let queries: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
        let matched = t.select_rows(predictions.boxes, &queries);
        let target_rows: Vec<Vec<f64>> =
            assignment.pairs.iter().map(|&(_, ti)| targets[ti].xywh().to_vec()).collect();
        let target_boxes = t.leaf(crate::autodiff::Tensor {
            rows: m,
            cols: 4,
            data: target_rows.into_iter().flatten().collect(),
        });

        let diff = t.sub(matched, target_boxes);
        let l1 = t.abs(diff);
        let l1_sum = t.sum_all(l1);
        let l1_term = t.scale(l1_sum, weights.box_l1 / m as f64);
        loss = t.add(loss, l1_term);

        let giou = giou_column(t, matched, target_boxes);
        let giou_sum = t.sum_all(giou);
        // mean(1 - giou) = 1 - mean(giou)
        let neg = t.scale(giou_sum, -weights.giou / m as f64);
        let giou_term = t.add_scalar(neg, weights.giou);
        loss = t.add(loss, giou_term);
    }
    Ok(loss)
}

#[inline]
fn ti_query_guard(q: usize, n_queries: usize) -> usize {
    debug_assert!(q < n_queries);
    q
}

//! Miniature query-based detector: conv backbone, transformer
//! encoder/decoder with role-tagged extra tokens, prediction heads,
//! bipartite matching and the supervised detection loss.

mod losses;
mod matching;
mod model;

pub use losses::{detection_loss, giou_xywh, iou_xywh, DetectionLossWeights};
pub use matching::{
    brute_force_assignment, hungarian_match, match_cost_matrix, solve_min_cost_assignment,
    Assignment, MAX_MATCH_TARGETS,
};
pub use model::{
    backbone_forward, build_object_queries, build_token_sequence, decoder_forward,
    encoder_forward, forward_pass, init_detector_params, predict_heads, Detector, DetectorConfig,
    DetectionVars, ExtraTokens, ForwardOutputs,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Token role tags carried through the transformer stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    DomainQuery,
    Image,
    ObjectQuery,
}

/// A spatial feature grid living on the tape as `[H*W x C]` rows.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub data: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Role-tagged token matrix `[T x D_model]` on the tape.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(tape: &Tape, tokens: Var, roles: Vec<Role>) -> Result<Self> {
        let t = tape.value(tokens);
        if t.rows != roles.len() {
            return Err(Error::InvalidInput(format!(
                "token rows {} != role tags {}",
                t.rows,
                roles.len()
            )));
        }
        let dq = roles.iter().filter(|r| **r == Role::DomainQuery).count();
        if dq > 1 {
            return Err(Error::InvalidInput(format!("{dq} domain-query tokens, at most 1 allowed")));
        }
        if let (Some(last_prompt), Some(first_image)) = (
            roles.iter().rposition(|r| *r == Role::Prompt),
            roles.iter().position(|r| *r == Role::Image),
        ) {
            if last_prompt > first_image {
                return Err(Error::InvalidInput(
                    "prompt tokens must precede image tokens".into(),
                ));
            }
        }
        Ok(TokenSequence { tokens, roles })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    fn role_range(&self, role: Role) -> Option<(usize, usize)> {
        let start = self.roles.iter().position(|r| *r == role)?;
        let end = self.roles.iter().rposition(|r| *r == role).unwrap() + 1;
        debug_assert!(self.roles[start..end].iter().all(|r| *r == role));
        Some((start, end))
    }

    /// Contiguous row range holding the image tokens.
    pub fn image_range(&self) -> Option<(usize, usize)> {
        self.role_range(Role::Image)
    }

    pub fn object_query_range(&self) -> Option<(usize, usize)> {
        self.role_range(Role::ObjectQuery)
    }

    pub fn domain_query_index(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::DomainQuery)
    }

    /// Slice out all rows with the given role as a new tape node.
    pub fn rows_with_role(&self, tape: &mut Tape, role: Role) -> Option<Var> {
        let (start, end) = self.role_range(role)?;
        Some(tape.slice_rows(self.tokens, start, end))
    }
}

/// Ground-truth or pseudo-label annotation: class index plus a normalized
/// `(cx, cy, w, h)` box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxLabel { class_id, cx, cy, w, h }
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.class_id < num_classes
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// Positive extent and no part of the box outside the unit frame.
    pub fn fully_inside(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx - self.w / 2.0 >= 0.0
            && self.cx + self.w / 2.0 <= 1.0
            && self.cy - self.h / 2.0 >= 0.0
            && self.cy + self.h / 2.0 <= 1.0
    }
}

/// Raw per-query predictions: `class_logits [N_q x (K+1)]`, last column is
/// the background class; `boxes [N_q x 4]` in normalized cxcywh.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionSet {
    pub class_logits: Tensor,
    pub boxes: Tensor,
}

impl DetectionSet {
    pub fn num_queries(&self) -> usize {
        self.class_logits.rows
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols - 1
    }

    pub fn background_class(&self) -> usize {
        self.class_logits.cols - 1
    }

    /// Row-wise softmax over the class logits.
    pub fn class_probs(&self) -> Tensor {
        let mut probs = self.class_logits.clone();
        for i in 0..probs.rows {
            let row = probs.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        probs
    }

    /// Per-query `(argmax_class, probability)` over the softmax, background
    /// included. Ties resolve to the lowest class index.
    pub fn top_classes(&self) -> Vec<(usize, f64)> {
        let probs = self.class_probs();
        (0..probs.rows)
            .map(|i| {
                let row = probs.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                (best, row[best])
            })
            .collect()
    }

    pub fn box_of(&self, query: usize) -> [f64; 4] {
        let r = self.boxes.row(query);
        [r[0], r[1], r[2], r[3]]
    }

    /// Keep only the listed query rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> DetectionSet {
        let mut logits = Tensor::zeros(rows.len(), self.class_logits.cols);
        let mut boxes = Tensor::zeros(rows.len(), 4);
        for (r, &q) in rows.iter().enumerate() {
            logits.row_mut(r).copy_from_slice(self.class_logits.row(q));
            boxes.row_mut(r).copy_from_slice(self.boxes.row(q));
        }
        DetectionSet { class_logits: logits, boxes }
    }
}

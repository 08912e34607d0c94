//! Exact bipartite matching between query predictions and targets.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::losses::{giou_xywh, DetectionLossWeights};
use super::{BoxLabel, DetectionSet};

/// Query-to-target pairing. Queries absent from `pairs` are background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(query_index, target_index)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|(q, _)| *q == query).map(|(_, t)| *t)
    }

    pub fn matched_queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|(q, _)| *q).collect()
    }

    pub fn is_valid_for(&self, n_queries: usize, n_targets: usize) -> bool {
        if self.pairs.len() != n_targets.min(n_queries) {
            return false;
        }
        let mut seen_q = vec![false; n_queries];
        let mut seen_t = vec![false; n_targets];
        for &(q, t) in &self.pairs {
            if q >= n_queries || t >= n_targets || seen_q[q] || seen_t[t] {
                return false;
            }
            seen_q[q] = true;
            seen_t[t] = true;
        }
        true
    }

    /// Total cost under a given matrix, summed in ascending query order so
    /// two equal assignments always produce the bit-identical sum.
    pub fn cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost.at(q, t)).sum()
    }
}

/// Pairwise matching costs `[n_queries x n_targets]`:
/// `class_w * (-p_q[class_t]) + l1_w * L1(box) + giou_w * (-giou)`.
pub fn match_cost_matrix(
    predictions: &DetectionSet,
    targets: &[BoxLabel],
    weights: &DetectionLossWeights,
) -> Tensor {
    let probs = predictions.class_probs();
    let nq = predictions.num_queries();
    let mut cost = Tensor::zeros(nq, targets.len());
    for (ti, target) in targets.iter().enumerate() {
        let tb = target.xywh();
        for q in 0..nq {
            let pb = predictions.box_of(q);
            let l1: f64 = pb.iter().zip(&tb).map(|(a, b)| (a - b).abs()).sum();
            let c = weights.class * (-probs.at(q, target.class_id))
                + weights.box_l1 * l1
                + weights.giou * (-giou_xywh(pb, tb));
            cost.set(q, ti, c);
        }
    }
    cost
}

/// Exact-matching budget: the subset DP walks `2^n_targets` states.
pub const MAX_MATCH_TARGETS: usize = 20;

/// Minimum-cost injective assignment covering every target. Requires
/// `n_targets <= n_queries`; rows are queries, columns targets.
pub fn solve_min_cost_assignment(cost: &Tensor) -> Result<Assignment> {
    let (nq, nt) = (cost.rows, cost.cols);
    if nt > nq {
        return Err(Error::InvalidInput(format!("{nt} targets exceed {nq} queries")));
    }
    if nt > MAX_MATCH_TARGETS {
        return Err(Error::InvalidInput(format!(
            "{nt} targets exceed the exact matcher budget of {MAX_MATCH_TARGETS}"
        )));
    }
    if nt == 0 {
        return Ok(Assignment { pairs: Vec::new() });
    }

    let full = (1usize << nt) - 1;
    const SKIP: u8 = u8::MAX;
    // f[s] = best cost with the queries seen so far covering target set s.
    let mut f = vec![f64::INFINITY; full + 1];
    f[0] = 0.0;
    let mut choice = vec![SKIP; (full + 1) * nq];
    for q in 0..nq {
        let mut next = f.clone(); // carrying f over = query q unmatched
        for s in 0..=full {
            if s.count_ones() as usize > q + 1 {
                continue;
            }
            for t in 0..nt {
                let bit = 1usize << t;
                if s & bit == 0 {
                    continue;
                }
                let base = f[s ^ bit];
                if base == f64::INFINITY {
                    continue;
                }
                let cand = base + cost.at(q, t);
                if cand < next[s] {
                    next[s] = cand;
                    choice[q * (full + 1) + s] = t as u8;
                }
            }
        }
        // Record in `choice` only the states where matching q improved on
        // skipping; states where `next == f` keep SKIP for reconstruction.
        for s in 0..=full {
            if choice[q * (full + 1) + s] != SKIP && next[s] == f[s] {
                choice[q * (full + 1) + s] = SKIP;
            }
        }
        f = next;
    }
    assert!(f[full].is_finite(), "assignment DP failed to cover all targets");

    let mut pairs = Vec::with_capacity(nt);
    let mut s = full;
    for q in (0..nq).rev() {
        let c = choice[q * (full + 1) + s];
        if c != SKIP {
            pairs.push((q, c as usize));
            s ^= 1usize << c;
        }
        if s == 0 {
            break;
        }
    }
    assert_eq!(s, 0, "assignment reconstruction left targets uncovered");
    pairs.reverse();
    Ok(Assignment { pairs })
}

/// Match predictions to targets by minimizing the combined class/box cost.
pub fn hungarian_match(
    predictions: &DetectionSet,
    targets: &[BoxLabel],
    weights: &DetectionLossWeights,
) -> Result<Assignment> {
    if targets.len() > predictions.num_queries() {
        return Err(Error::InvalidInput(format!(
            "{} targets exceed {} queries",
            targets.len(),
            predictions.num_queries()
        )));
    }
    let cost = match_cost_matrix(predictions, targets, weights);
    solve_min_cost_assignment(&cost)
}

/// Exhaustive minimum over every injective target placement; test oracle.
/// Ties resolve to the first assignment in lexicographic enumeration order.
pub fn brute_force_assignment(cost: &Tensor) -> Assignment {
    let (nq, nt) = (cost.rows, cost.cols);
    assert!(nt <= nq, "oracle needs n_targets <= n_queries");
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    // Enumerate ordered placements of targets onto distinct queries.
    let mut queries_for_target = vec![usize::MAX; nt];
    fn recurse(
        ti: usize,
        nt: usize,
        nq: usize,
        cost: &Tensor,
        used: &mut Vec<bool>,
        queries_for_target: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if ti == nt {
            let mut pairs: Vec<(usize, usize)> =
                queries_for_target.iter().enumerate().map(|(t, &q)| (q, t)).collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(q, t)| cost.at(q, t)).sum();
            if best.as_ref().map_or(true, |(b, _)| total < *b) {
                *best = Some((total, pairs));
            }
            return;
        }
        for q in 0..nq {
            if !used[q] {
                used[q] = true;
                queries_for_target[ti] = q;
                recurse(ti + 1, nt, nq, cost, used, queries_for_target, best);
                used[q] = false;
            }
        }
    }
    let mut used = vec![false; nq];
    recurse(0, nt, nq, cost, &mut used, &mut queries_for_target, &mut best);
    let (_, pairs) = best.unwrap_or((0.0, Vec::new()));
    Assignment { pairs }
}

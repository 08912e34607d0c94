//! Adversarial alignment: gradient reversal, domain discriminators, global
//! domain-query losses, instance-aware losses with soft masking, and
//! pseudo-label filtering.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::detector::{Assignment, BoxLabel, DetectionSet};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            DomainLabel::Source => 0.0,
            DomainLabel::Target => 1.0,
        }
    }
}

/// Balancing weights, the confidence threshold, and the reversal strength.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvLossWeights {
    pub dqfa_enc: f64,
    pub dqfa_dec: f64,
    pub tiafa_enc: f64,
    pub tiafa_dec: f64,
    pub tau: f64,
    pub grl_lambda: f64,
}

impl Default for AdvLossWeights {
    fn default() -> Self {
        AdvLossWeights {
            dqfa_enc: 1.0,
            dqfa_dec: 1.0,
            tiafa_enc: 1.0,
            tiafa_dec: 1.0,
            tau: 0.7,
            grl_lambda: 1.0,
        }
    }
}

impl AdvLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dqfa_enc", self.dqfa_enc),
            ("dqfa_dec", self.dqfa_dec),
            ("tiafa_enc", self.tiafa_enc),
            ("tiafa_dec", self.tiafa_dec),
            ("grl_lambda", self.grl_lambda),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// The four discriminator heads: global (domain-query) and instance-level,
/// one each for encoder and decoder features.
pub const DISCRIMINATORS: [&str; 4] =
    ["disc.enc_global", "disc.dec_global", "disc.enc_inst", "disc.dec_inst"];

pub const DISC_HIDDEN: usize = 64;

pub fn init_discriminators(params: &mut ParamSet, rng: &mut ChaCha8Rng, d_model: usize) {
    for prefix in DISCRIMINATORS {
        nn::init_linear_layer(params, rng, &format!("{prefix}.l1"), DISC_HIDDEN, d_model);
        nn::init_linear_layer(params, rng, &format!("{prefix}.l2"), 1, DISC_HIDDEN);
    }
}

/// Probability head: 2-layer feed-forward with sigmoid output, `[n x D] ->
/// [n x 1]` in (0,1).
pub fn discriminator(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = nn::linear(t, b, &format!("{prefix}.l1"), x);
    let h = t.relu(h);
    let out = nn::linear(t, b, &format!("{prefix}.l2"), h);
    t.sigmoid(out)
}

/// Identity forward, gradient scaled by `-strength` on the way back.
pub fn gradient_reversal(t: &mut Tape, x: Var, strength: f64) -> Var {
    t.grad_reverse(x, strength)
}

/// Linear warm-up of the reversal strength over the first fifth of training.
pub fn grl_schedule(step: usize, total_steps: usize, grl_lambda: f64) -> f64 {
    if total_steps == 0 {
        return grl_lambda;
    }
    let warm = (total_steps as f64 * 0.2).max(1.0);
    let frac = (step as f64 / warm).min(1.0);
    frac * grl_lambda
}

const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of a probability column against one domain
/// label: `-[t log p + (1-t) log(1-p)]`, probabilities clamped away from
/// {0, 1}.
pub fn domain_bce(t: &mut Tape, probs: Var, label: DomainLabel) -> Var {
    let n = t.value(probs).rows;
    assert_eq!(t.value(probs).cols, 1, "domain_bce expects a probability column");
    assert!(n > 0);
    let p = match label {
        DomainLabel::Target => probs,
        DomainLabel::Source => {
            let neg = t.scale(probs, -1.0);
            t.add_scalar(neg, 1.0)
        }
    };
    let clamped = t.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let ln = t.ln(clamped);
    let mean = t.mean_all(ln);
    t.scale(mean, -1.0)
}

/// Global alignment on the final-layer domain-query tokens: each token runs
/// through gradient reversal, its discriminator, and the domain BCE; the two
/// terms are combined with their balancing weights.
pub fn dqfa_loss(
    t: &mut Tape,
    b: &Bound,
    enc_domain_token: Var,
    dec_domain_token: Var,
    label: DomainLabel,
    w: &AdvLossWeights,
    grl_strength: f64,
) -> Var {
    let enc = gradient_reversal(t, enc_domain_token, grl_strength);
    let enc_prob = discriminator(t, b, "disc.enc_global", enc);
    let enc_bce = domain_bce(t, enc_prob, label);
    let dec = gradient_reversal(t, dec_domain_token, grl_strength);
    let dec_prob = discriminator(t, b, "disc.dec_global", dec);
    let dec_bce = domain_bce(t, dec_prob, label);
    let lhs = t.scale(enc_bce, w.dqfa_enc);
    let rhs = t.scale(dec_bce, w.dqfa_dec);
    t.add(lhs, rhs)
}

/// Per-token foreground weights in [0,1] for the encoder image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub psi: Vec<f64>,
}

const ZERO_NORM_GUARD: f64 = 1e-12;

/// Attention-like relevance of each encoder image token to the matched
/// queries: mean normalized dot product squashed through a sigmoid.
/// Returns `None` when no query survives the zero-norm guard — the
/// instance-level encoder term is skipped for that sample.
///
/// Computed on detached values: the mask weights features but is not itself
/// a gradient path.
pub fn compute_soft_mask(image_tokens: &Tensor, matched_queries: &Tensor) -> Option<SoftMask> {
    if matched_queries.rows == 0 {
        return None;
    }
    assert_eq!(image_tokens.cols, matched_queries.cols, "embedding width mismatch");
    let normalize = |rows: &Tensor| -> Vec<Vec<f64>> {
        (0..rows.rows)
            .map(|i| {
                let r = rows.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < ZERO_NORM_GUARD {
                    Vec::new()
                } else {
                    r.iter().map(|v| v / n).collect()
                }
            })
            .collect()
    };
    let queries: Vec<Vec<f64>> =
        normalize(matched_queries).into_iter().filter(|q| !q.is_empty()).collect();
    if queries.is_empty() {
        return None;
    }
    let tokens = normalize(image_tokens);
    let m = queries.len() as f64;
    let psi = tokens
        .iter()
        .map(|z| {
            if z.is_empty() {
                return sigmoid(0.0);
            }
            let raw: f64 =
                queries.iter().map(|q| q.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).sum();
            sigmoid(raw / m)
        })
        .collect();
    Some(SoftMask { psi })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Instance-aware encoder loss: tokens scaled by their mask weight, then
/// reversed, discriminated, and averaged over all image tokens.
pub fn tiafa_encoder_loss(
    t: &mut Tape,
    b: &Bound,
    image_tokens: Var,
    mask: &SoftMask,
    label: DomainLabel,
    grl_strength: f64,
) -> Result<Var> {
    let n = t.value(image_tokens).rows;
    if mask.psi.len() != n {
        return Err(Error::InvalidInput(format!(
            "mask length {} != token count {n}",
            mask.psi.len()
        )));
    }
    if mask.psi.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("mask entries outside [0,1]".into()));
    }
    let rev = gradient_reversal(t, image_tokens, grl_strength);
    let psi = t.leaf(Tensor::from_vec(n, 1, mask.psi.clone()));
    let masked = t.mul_col(rev, psi);
    let probs = discriminator(t, b, "disc.enc_inst", masked);
    Ok(domain_bce(t, probs, label))
}

/// Binary foreground indicator per query: 1 exactly for matched indices.
pub fn decoder_foreground_weights(assignment: &Assignment, n_queries: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_queries];
    for &(q, _) in &assignment.pairs {
        w[q] = 1.0;
    }
    w
}

/// Instance-aware decoder loss over the matched queries only. All-zero
/// weights mean no foreground this sample; the term is skipped (`None`).
pub fn tiafa_decoder_loss(
    t: &mut Tape,
    b: &Bound,
    decoded_queries: Var,
    weights: &[f64],
    label: DomainLabel,
    grl_strength: f64,
) -> Result<Option<Var>> {
    let n = t.value(decoded_queries).rows;
    if weights.len() != n {
        return Err(Error::InvalidInput(format!(
            "weight length {} != query count {n}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w != 0.0 && *w != 1.0) {
        return Err(Error::InvalidInput("foreground weights must be binary".into()));
    }
    let matched: Vec<usize> =
        weights.iter().enumerate().filter(|(_, w)| **w == 1.0).map(|(i, _)| i).collect();
    if matched.is_empty() {
        return Ok(None);
    }
    let rev = gradient_reversal(t, decoded_queries, grl_strength);
    let rows = t.select_rows(rev, &matched);
    let probs = discriminator(t, b, "disc.dec_inst", rows);
    Ok(Some(domain_bce(t, probs, label)))
}

/// The individually computed adversarial terms of one sample; absent parts
/// were skipped upstream (flag off, no domain token, no foreground).
#[derive(Debug, Clone, Copy, Default)]
pub struct AdvParts {
    /// Already carries its internal enc/dec balancing weights.
    pub dqfa: Option<Var>,
    pub tiafa_enc: Option<Var>,
    pub tiafa_dec: Option<Var>,
}

/// Combine the adversarial terms: DQFA plus the balanced instance terms.
/// The optimized objective is `L_det + L_adv`; the feature-side sign flip
/// happens inside gradient reversal, so the discriminators descend on this
/// sum while the feature path ascends.
pub fn total_adversarial_loss(t: &mut Tape, parts: &AdvParts, w: &AdvLossWeights) -> Var {
    let mut total = t.leaf(Tensor::scalar(0.0));
    if let Some(dqfa) = parts.dqfa {
        total = t.add(total, dqfa);
    }
    if let Some(enc) = parts.tiafa_enc {
        let scaled = t.scale(enc, w.tiafa_enc);
        total = t.add(total, scaled);
    }
    if let Some(dec) = parts.tiafa_dec {
        let scaled = t.scale(dec, w.tiafa_dec);
        total = t.add(total, scaled);
    }
    total
}

/// A kept pseudo-label with its provenance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PseudoLabel {
    pub label: BoxLabel,
    pub confidence: f64,
    pub query: usize,
}

/// Keep the confident non-background predictions, ordered by descending
/// confidence with ties broken by query index.
pub fn filter_pseudo_labels_detailed(
    detections: &DetectionSet,
    tau: f64,
) -> Result<Vec<PseudoLabel>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau {tau} outside (0, 1)")));
    }
    let background = detections.background_class();
    let mut kept: Vec<PseudoLabel> = detections
        .top_classes()
        .into_iter()
        .enumerate()
        .filter(|&(_, (class, conf))| class != background && conf >= tau)
        .map(|(q, (class, conf))| {
            let b = detections.box_of(q);
            PseudoLabel {
                label: BoxLabel::new(class, b[0], b[1], b[2], b[3]),
                confidence: conf,
                query: q,
            }
        })
        .collect();
    kept.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences are finite")
            .then(a.query.cmp(&b.query))
    });
    Ok(kept)
}

pub fn filter_pseudo_labels(detections: &DetectionSet, tau: f64) -> Result<Vec<BoxLabel>> {
    Ok(filter_pseudo_labels_detailed(detections, tau)?.into_iter().map(|p| p.label).collect())
}

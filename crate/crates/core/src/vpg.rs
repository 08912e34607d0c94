//! Visual prompt generation: CBAM feature refinement, query extraction,
//! prompt synthesis from a component bank, and the bank's EMA shadow.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_linear, randn, Bound, ParamSet, Tape, Tensor, Var};
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VpgConfig {
    /// Component rows in the prompt bank (M_c).
    pub components: usize,
    /// Prompt embedding width (D_p).
    pub prompt_dim: usize,
    /// Prompt tokens emitted per image.
    pub prompt_tokens: usize,
    /// EMA coefficient for the slow bank.
    pub beta: f64,
    /// Channel-gate MLP bottleneck divisor.
    pub cbam_reduction: usize,
}

impl Default for VpgConfig {
    fn default() -> Self {
        VpgConfig {
            components: 8,
            prompt_dim: 64,
            prompt_tokens: 1,
            beta: 0.99,
            cbam_reduction: 16,
        }
    }
}

impl VpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("prompt bank needs at least one component".into()));
        }
        if self.prompt_dim == 0 {
            return Err(Error::Config("prompt_dim must be >= 1".into()));
        }
        if self.prompt_tokens == 0 {
            return Err(Error::Config("prompt_tokens must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.cbam_reduction == 0 {
            return Err(Error::Config("cbam_reduction must be >= 1".into()));
        }
        Ok(())
    }
}

/// EMA shadow of the optimizer-updated fast bank. The fast bank itself lives
/// in the parameter set as `vpg.bank.fast`; forward passes read `slow` while
/// gradients are routed to fast through a straight-through composition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptBank {
    pub slow: Tensor,
    pub beta: f64,
}

impl PromptBank {
    pub fn validate(&self, fast: &Tensor) -> Result<()> {
        if !self.slow.same_shape(fast) {
            return Err(Error::InvalidInput(format!(
                "slow bank {}x{} != fast bank {}x{}",
                self.slow.rows, self.slow.cols, fast.rows, fast.cols
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidInput(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !self.slow.all_finite() || !fast.all_finite() {
            return Err(Error::InvalidInput("bank contains non-finite entries".into()));
        }
        Ok(())
    }
}

const BANK_INIT_STD: f64 = 0.02;
pub const FAST_BANK_PARAM: &str = "vpg.bank.fast";

/// Register VPG parameters and return the matching EMA state. The slow bank
/// starts as an exact copy of the fast bank.
pub fn init_vpg_params(
    cfg: &VpgConfig,
    feat_channels: usize,
    d_model: usize,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> PromptBank {
    let hidden = (feat_channels / cfg.cbam_reduction).max(1);
    params.insert("vpg.cbam.mlp1.w", init_linear(rng, hidden, feat_channels));
    params.insert("vpg.cbam.mlp1.b", Tensor::zeros(1, hidden));
    params.insert("vpg.cbam.mlp2.w", init_linear(rng, feat_channels, hidden));
    params.insert("vpg.cbam.mlp2.b", Tensor::zeros(1, feat_channels));
    params.insert("vpg.cbam.spatial.w", init_linear(rng, 1, 3 * 3 * 2));
    params.insert("vpg.cbam.spatial.b", Tensor::zeros(1, 1));
    params.insert("vpg.query.w", init_linear(rng, cfg.prompt_dim, feat_channels));
    params.insert("vpg.query.b", Tensor::zeros(1, cfg.prompt_dim));
    let fast = randn(rng, cfg.components, cfg.prompt_dim, BANK_INIT_STD);
    params.insert("vpg.proj.w", init_linear(rng, d_model, cfg.prompt_dim));
    params.insert("vpg.proj.b", Tensor::zeros(1, d_model));
    let bank = PromptBank { slow: fast.clone(), beta: cfg.beta };
    params.insert(FAST_BANK_PARAM, fast);
    bank
}

/// CBAM refinement: channel gate (shared MLP over average- and max-pooled
/// descriptors), then spatial gate (3x3 conv over the channelwise
/// average/max planes). Both gates are sigmoids, so outputs shrink toward
/// zero, never grow.
pub fn cbam_refine(t: &mut Tape, b: &Bound, feat: &FeatureMap) -> FeatureMap {
    let x = feat.data;

    let avg_c = t.mean_dim0(x);
    let max_c = t.max_dim0(x);
    let gate_mlp = |t: &mut Tape, v: Var| {
        let h = nn::linear(t, b, "vpg.cbam.mlp1", v);
        let h = t.relu(h);
        nn::linear(t, b, "vpg.cbam.mlp2", h)
    };
    let ga = gate_mlp(t, avg_c);
    let gm = gate_mlp(t, max_c);
    let summed = t.add(ga, gm);
    let channel_gate = t.sigmoid(summed);
    let x1 = t.mul_row(x, channel_gate);

    let avg_s = t.mean_dim1(x1);
    let max_s = t.max_dim1(x1);
    let planes = t.concat_cols(&[avg_s, max_s]);
    let conv = t.conv2d(
        planes,
        b.var("vpg.cbam.spatial.w"),
        b.var("vpg.cbam.spatial.b"),
        feat.h,
        feat.w,
        3,
        1,
        1,
    );
    let spatial_gate = t.sigmoid(conv);
    let x2 = t.mul_col(x1, spatial_gate);

    FeatureMap { data: x2, h: feat.h, w: feat.w, c: feat.c }
}

/// Global-average-pool the refined map and project it to the prompt query.
pub fn feature_to_query(t: &mut Tape, b: &Bound, feat: &FeatureMap) -> Var {
    let pooled = t.mean_dim0(feat.data);
    nn::linear(t, b, "vpg.query", pooled)
}

/// A generated prompt: the convex bank combination (`pre`, `[n_p x D_p]`)
/// and its projection into the encoder width (`projected`, `[n_p x D_model]`).
#[derive(Debug, Clone, Copy)]
pub struct Prompt {
    pub pre: Var,
    pub projected: Var,
    pub weights: Var,
}

/// Synthesize a prompt from the bank: `w = softmax(q_hat . slow^T)`,
/// `p = w . slow`. The forward pass reads the slow bank; the straight-through
/// node routes gradients to the fast bank unchanged.
pub fn generate_prompt(
    cfg: &VpgConfig,
    t: &mut Tape,
    b: &Bound,
    q: Var,
    bank: &PromptBank,
) -> Result<Prompt> {
    if bank.slow.rows == 0 {
        return Err(Error::InvalidInput("empty prompt bank".into()));
    }
    let fast = b.var(FAST_BANK_PARAM);
    bank.validate(t.value(fast))?;
    if t.value(q).cols != bank.slow.cols {
        return Err(Error::InvalidInput(format!(
            "query width {} != bank width {}",
            t.value(q).cols,
            bank.slow.cols
        )));
    }

    let bank_st = t.straight_through(fast, bank.slow.clone());
    let q_hat = t.l2_normalize_rows(q);
    let logits = t.matmul_tb(q_hat, bank_st);
    let weights = t.softmax_rows(logits);
    let pre_single = t.matmul(weights, bank_st);
    let pre = if cfg.prompt_tokens == 1 {
        pre_single
    } else {
        t.select_rows(pre_single, &vec![0; cfg.prompt_tokens])
    };
    let projected = nn::linear(t, b, "vpg.proj", pre);
    Ok(Prompt { pre, projected, weights })
}

/// Refresh the EMA shadow after an optimizer step: `slow <- b*slow + (1-b)*fast`.
pub fn ema_update(fast: &Tensor, bank: &mut PromptBank) -> Result<()> {
    bank.validate(fast)?;
    let beta = bank.beta;
    bank.slow.axpby(beta, 1.0 - beta, fast);
    Ok(())
}

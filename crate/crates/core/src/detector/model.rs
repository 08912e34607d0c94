//! Detector configuration, parameter init, and the forward stages.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{randn, Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;

use super::{DetectionSet, FeatureMap, Role, TokenSequence};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    /// Foreground class count K; background occupies logit column K.
    pub num_classes: usize,
    pub ffn_dim: usize,
    /// Output channels of each stride-2 backbone conv; the last must equal
    /// `d_model` so feature cells become tokens directly.
    pub backbone_channels: Vec<usize>,
    /// Prompt rows accepted by the token assembler (learned positional
    /// embedding is sized to this).
    pub prompt_tokens: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 10,
            num_classes: 3,
            ffn_dim: 128,
            backbone_channels: vec![16, 32, 64],
            prompt_tokens: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return fail(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_queries == 0 {
            return fail("n_queries must be >= 1".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be >= 1".into());
        }
        if self.backbone_channels.is_empty() {
            return fail("backbone needs at least one conv layer".into());
        }
        if *self.backbone_channels.last().unwrap() != self.d_model {
            return fail(format!(
                "last backbone channel count {} must equal d_model {}",
                self.backbone_channels.last().unwrap(),
                self.d_model
            ));
        }
        if self.prompt_tokens == 0 {
            return fail("prompt_tokens must be >= 1".into());
        }
        Ok(())
    }

    pub fn background_class(&self) -> usize {
        self.num_classes
    }

    /// Total spatial downsampling of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }
}

const CONV_KERNEL: usize = 3;
const EMBED_STD: f64 = 0.02;

/// Detector parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamSet,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let params = init_detector_params(&cfg, rng);
        Ok(Detector { cfg, params })
    }

    /// Plain inference without prompts or domain tokens.
    pub fn detect(&self, pixels: &Tensor, h: usize, w: usize) -> Result<DetectionSet> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let out = forward_pass(&self.cfg, &mut tape, &bound, pixels, h, w, None, false)?;
        Ok(out.detections.to_set(&tape))
    }
}

pub fn init_detector_params(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let mut in_c = 3;
    for (i, &out_c) in cfg.backbone_channels.iter().enumerate() {
        p.insert(
            format!("det.backbone.conv{i}.w"),
            crate::autodiff::init_linear(rng, out_c, CONV_KERNEL * CONV_KERNEL * in_c),
        );
        p.insert(format!("det.backbone.conv{i}.b"), Tensor::zeros(1, out_c));
        in_c = out_c;
    }
    for i in 0..cfg.enc_layers {
        nn::init_encoder_layer(&mut p, rng, &format!("det.enc.{i}"), cfg.d_model, cfg.ffn_dim);
    }
    for i in 0..cfg.dec_layers {
        nn::init_decoder_layer(&mut p, rng, &format!("det.dec.{i}"), cfg.d_model, cfg.ffn_dim);
    }
    p.insert("det.query_embed", randn(rng, cfg.n_queries, cfg.d_model, EMBED_STD));
    p.insert("det.domain_enc", randn(rng, 1, cfg.d_model, EMBED_STD));
    p.insert("det.domain_dec", randn(rng, 1, cfg.d_model, EMBED_STD));
    p.insert("det.pos.prompt", randn(rng, cfg.prompt_tokens, cfg.d_model, EMBED_STD));
    p.insert("det.pos.domain_enc", randn(rng, 1, cfg.d_model, EMBED_STD));
    nn::init_linear_layer(&mut p, rng, "det.head.class", cfg.num_classes + 1, cfg.d_model);
    nn::init_linear_layer(&mut p, rng, "det.head.box.0", cfg.d_model, cfg.d_model);
    nn::init_linear_layer(&mut p, rng, "det.head.box.1", cfg.d_model, cfg.d_model);
    nn::init_linear_layer(&mut p, rng, "det.head.box.2", 4, cfg.d_model);
    p
}

/// Conv backbone: stride-2 3x3 convs with ReLU, `[h*w x 3]` pixels in,
/// `[h' * w' x d_model]` feature cells out.
pub fn backbone_forward(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    pixels: &Tensor,
    h: usize,
    w: usize,
) -> Result<FeatureMap> {
    if pixels.rows != h * w || pixels.cols != 3 {
        return Err(Error::InvalidInput(format!(
            "image tensor is {}x{}, expected {}x3",
            pixels.rows,
            pixels.cols,
            h * w
        )));
    }
    if !pixels.all_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let mut x = t.leaf(pixels.clone());
    let (mut ch, mut cw) = (h, w);
    for i in 0..cfg.backbone_channels.len() {
        let wv = b.var(&format!("det.backbone.conv{i}.w"));
        let bv = b.var(&format!("det.backbone.conv{i}.b"));
        x = t.conv2d(x, wv, bv, ch, cw, CONV_KERNEL, 2, 1);
        x = t.relu(x);
        ch = (ch - 1) / 2 + 1;
        cw = (cw - 1) / 2 + 1;
    }
    Ok(FeatureMap { data: x, h: ch, w: cw, c: cfg.d_model })
}

/// Extra tokens prepended to the image tokens for the encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtraTokens {
    /// Prompt rows `[prompt_tokens x d_model]`, usually a VPG output.
    pub prompt: Option<Var>,
    /// Append the learned encoder domain-query token.
    pub domain_query: bool,
}

/// Assemble `[prompt?, domain_query?, image]` with positional information:
/// fixed sinusoidal codes on image tokens, learned embeddings on the rest.
pub fn build_token_sequence(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    feat: &FeatureMap,
    extra: ExtraTokens,
) -> Result<TokenSequence> {
    if feat.c != cfg.d_model {
        return Err(Error::InvalidInput(format!(
            "feature channels {} != d_model {}",
            feat.c, cfg.d_model
        )));
    }
    let pos = t.leaf(nn::sinusoidal_pos_2d(feat.h, feat.w, cfg.d_model));
    let img = t.add(feat.data, pos);

    let mut parts = Vec::new();
    let mut roles = Vec::new();
    if let Some(prompt) = extra.prompt {
        let rows = t.value(prompt).rows;
        if rows != cfg.prompt_tokens {
            return Err(Error::InvalidInput(format!(
                "prompt has {rows} rows, config expects {}",
                cfg.prompt_tokens
            )));
        }
        let with_pos = t.add(prompt, b.var("det.pos.prompt"));
        parts.push(with_pos);
        roles.extend(std::iter::repeat(Role::Prompt).take(rows));
    }
    if extra.domain_query {
        let dq = t.add(b.var("det.domain_enc"), b.var("det.pos.domain_enc"));
        parts.push(dq);
        roles.push(Role::DomainQuery);
    }
    parts.push(img);
    roles.extend(std::iter::repeat(Role::Image).take(feat.h * feat.w));

    let tokens = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
    TokenSequence::new(t, tokens, roles)
}

/// Run the encoder stack; every token attends to every token.
pub fn encoder_forward(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    seq: &TokenSequence,
) -> Result<TokenSequence> {
    encoder_forward_masked(cfg, t, b, seq, false)
}

/// Encoder with an optional control mask that blocks all attention between
/// image tokens and the extra (prompt/domain-query) tokens. The masked mode
/// exists to verify that extra tokens influence image tokens only through
/// attention; production paths always run unmasked.
pub fn encoder_forward_masked(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    seq: &TokenSequence,
    mask_extra: bool,
) -> Result<TokenSequence> {
    if t.value(seq.tokens).cols != cfg.d_model {
        return Err(Error::InvalidInput(format!(
            "token width {} != d_model {}",
            t.value(seq.tokens).cols,
            cfg.d_model
        )));
    }
    if seq.image_range().is_none() {
        return Err(Error::InvalidInput("encoder input has no image tokens".into()));
    }
    let bias = if mask_extra {
        let n = seq.len();
        let mut m = Tensor::zeros(n, n);
        for qi in 0..n {
            for ki in 0..n {
                let qi_img = seq.roles[qi] == Role::Image;
                let ki_img = seq.roles[ki] == Role::Image;
                if qi_img != ki_img {
                    m.set(qi, ki, -1e30);
                }
            }
        }
        Some(m)
    } else {
        None
    };
    let mut x = seq.tokens;
    for i in 0..cfg.enc_layers {
        x = nn::encoder_layer_masked(
            t,
            b,
            &format!("det.enc.{i}"),
            x,
            cfg.n_heads,
            bias.as_ref(),
        );
    }
    TokenSequence::new(t, x, seq.roles.clone())
}

/// Learned object queries, optionally led by the decoder domain-query token.
pub fn build_object_queries(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    domain_query: bool,
) -> TokenSequence {
    let qe = b.var("det.query_embed");
    let (tokens, mut roles) = if domain_query {
        (t.concat_rows(&[b.var("det.domain_dec"), qe]), vec![Role::DomainQuery])
    } else {
        (qe, Vec::new())
    };
    roles.extend(std::iter::repeat(Role::ObjectQuery).take(cfg.n_queries));
    TokenSequence::new(t, tokens, roles).expect("query sequence is well-formed by construction")
}

/// Decoder stack: self-attention over the queries, cross-attention over the
/// image tokens of `memory` only.
pub fn decoder_forward(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    queries: &TokenSequence,
    memory: &TokenSequence,
) -> Result<TokenSequence> {
    let Some((img_start, img_end)) = memory.image_range() else {
        return Err(Error::InvalidInput("decoder memory has no image tokens".into()));
    };
    if t.value(queries.tokens).cols != cfg.d_model {
        return Err(Error::InvalidInput("query width != d_model".into()));
    }
    let mem_img = t.slice_rows(memory.tokens, img_start, img_end);
    let mut x = queries.tokens;
    for i in 0..cfg.dec_layers {
        x = nn::decoder_layer(t, b, &format!("det.dec.{i}"), x, mem_img, cfg.n_heads);
    }
    TokenSequence::new(t, x, queries.roles.clone())
}

/// Class logits + sigmoid boxes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DetectionVars {
    pub class_logits: Var,
    pub boxes: Var,
}

impl DetectionVars {
    pub fn to_set(&self, tape: &Tape) -> DetectionSet {
        DetectionSet {
            class_logits: tape.value(self.class_logits).clone(),
            boxes: tape.value(self.boxes).clone(),
        }
    }
}

/// Prediction heads over the object-query rows of the decoded sequence.
pub fn predict_heads(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    decoded: &TokenSequence,
) -> Result<DetectionVars> {
    let Some(q) = decoded.rows_with_role(t, Role::ObjectQuery) else {
        return Err(Error::InvalidInput("decoded sequence has no object queries".into()));
    };
    if t.value(q).cols != cfg.d_model {
        return Err(Error::InvalidInput("decoded token width != d_model".into()));
    }
    let class_logits = nn::linear(t, b, "det.head.class", q);
    let h = nn::linear(t, b, "det.head.box.0", q);
    let h = t.relu(h);
    let h = nn::linear(t, b, "det.head.box.1", h);
    let h = t.relu(h);
    let h = nn::linear(t, b, "det.head.box.2", h);
    let boxes = t.sigmoid(h);
    Ok(DetectionVars { class_logits, boxes })
}

/// Everything downstream stages need from one image's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub encoded: TokenSequence,
    pub decoded: TokenSequence,
    pub detections: DetectionVars,
}

/// Full pass: backbone, token assembly, encoder, decoder, heads.
#[allow(clippy::too_many_arguments)]
pub fn forward_pass(
    cfg: &DetectorConfig,
    t: &mut Tape,
    b: &Bound,
    pixels: &Tensor,
    h: usize,
    w: usize,
    prompt: Option<Var>,
    domain_queries: bool,
) -> Result<ForwardOutputs> {
    let feat = backbone_forward(cfg, t, b, pixels, h, w)?;
    let seq = build_token_sequence(
        cfg,
        t,
        b,
        &feat,
        ExtraTokens { prompt, domain_query: domain_queries },
    )?;
    let encoded = encoder_forward(cfg, t, b, &seq)?;
    let queries = build_object_queries(cfg, t, b, domain_queries);
    let decoded = decoder_forward(cfg, t, b, &queries, &encoded)?;
    let detections = predict_heads(cfg, t, b, &decoded)?;
    Ok(ForwardOutputs { encoded, decoded, detections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 4,
            num_classes: 3,
            ffn_dim: 32,
            backbone_channels: vec![8, 16],
            prompt_tokens: 1,
        }
    }

    fn rand_pixels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        use rand::Rng;
        let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor { rows: h * w, cols: 3, data }
    }

    #[test]
    fn zeroed_final_conv_gives_zero_features() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let last = cfg.backbone_channels.len() - 1;
        *det.params.get_mut(&format!("det.backbone.conv{last}.w")) =
            Tensor::zeros(cfg.d_model, 3 * 3 * cfg.backbone_channels[last - 1]);
        *det.params.get_mut(&format!("det.backbone.conv{last}.b")) = Tensor::zeros(1, cfg.d_model);
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let pixels = Tensor::zeros(16 * 16, 3);
        let feat = backbone_forward(&cfg, &mut t, &b, &pixels, 16, 16).unwrap();
        assert!(t.value(feat.data).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backbone_halves_extent_per_layer() {
        let cfg = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let pixels = rand_pixels(&mut rng, 32, 32);
        let feat = backbone_forward(&cfg, &mut t, &b, &pixels, 32, 32).unwrap();
        assert_eq!((feat.h, feat.w), (4, 4), "stride 8 over 32x32");
        assert_eq!(t.value(feat.data).cols, 64);
    }

    #[test]
    fn backbone_rejects_non_finite_input() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let mut pixels = Tensor::zeros(16 * 16, 3);
        pixels.data[5] = f64::NAN;
        let err = backbone_forward(&cfg, &mut t, &b, &pixels, 16, 16);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn encoder_preserves_roles_and_count() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let pixels = rand_pixels(&mut rng, 16, 16);
        let feat = backbone_forward(&cfg, &mut t, &b, &pixels, 16, 16).unwrap();
        let prompt = t.leaf(crate::autodiff::randn(&mut rng, 1, cfg.d_model, 0.1));
        let seq = build_token_sequence(
            &cfg,
            &mut t,
            &b,
            &feat,
            ExtraTokens { prompt: Some(prompt), domain_query: true },
        )
        .unwrap();
        let out = encoder_forward(&cfg, &mut t, &b, &seq).unwrap();
        assert_eq!(out.roles, seq.roles);
        assert_eq!(out.len(), 1 + 1 + 4 * 4);
        assert_eq!(out.roles[0], Role::Prompt);
        assert_eq!(out.roles[1], Role::DomainQuery);
    }

    #[test]
    fn zero_layer_stacks_are_identity() {
        let mut cfg = small_cfg();
        cfg.enc_layers = 0;
        cfg.dec_layers = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let x = crate::autodiff::randn(&mut rng, 6, cfg.d_model, 1.0);
        let xv = t.leaf(x.clone());
        let seq = TokenSequence::new(&t, xv, vec![Role::Image; 6]).unwrap();
        let enc = encoder_forward(&cfg, &mut t, &b, &seq).unwrap();
        assert_eq!(t.value(enc.tokens).data, x.data);
        let queries = build_object_queries(&cfg, &mut t, &b, false);
        let dec = decoder_forward(&cfg, &mut t, &b, &queries, &enc).unwrap();
        assert_eq!(t.value(dec.tokens).data, det.params.get("det.query_embed").data);
    }

    #[test]
    fn masked_extras_match_plain_image_run() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let img_tokens = crate::autodiff::randn(&mut rng, 9, cfg.d_model, 0.5);

        // Run A: image tokens only.
        let mut ta = Tape::new();
        let ba = Bound::bind(&mut ta, &det.params);
        let xa = ta.leaf(img_tokens.clone());
        let seq_a = TokenSequence::new(&ta, xa, vec![Role::Image; 9]).unwrap();
        let out_a = encoder_forward(&cfg, &mut ta, &ba, &seq_a).unwrap();
        let val_a = ta.value(out_a.tokens).clone();

        // Run B: prompt + domain query present but fully masked off.
        let mut tb = Tape::new();
        let bb = Bound::bind(&mut tb, &det.params);
        let prompt = tb.leaf(crate::autodiff::randn(&mut rng, 1, cfg.d_model, 0.5));
        let dq = tb.leaf(crate::autodiff::randn(&mut rng, 1, cfg.d_model, 0.5));
        let img = tb.leaf(img_tokens.clone());
        let tokens = tb.concat_rows(&[prompt, dq, img]);
        let mut roles = vec![Role::Prompt, Role::DomainQuery];
        roles.extend(vec![Role::Image; 9]);
        let seq_b = TokenSequence::new(&tb, tokens, roles).unwrap();
        let out_b = encoder_forward_masked(&cfg, &mut tb, &bb, &seq_b, true).unwrap();
        let val_b = tb.value(out_b.tokens).clone();

        for i in 0..9 {
            assert_eq!(val_a.row(i), val_b.row(2 + i), "image row {i} diverged");
        }
    }

    #[test]
    fn heads_zero_weights_give_uniform_probs_and_centered_boxes() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut det = Detector::new(cfg.clone(), &mut rng).unwrap();
        for name in [
            "det.head.class.w",
            "det.head.class.b",
            "det.head.box.0.w",
            "det.head.box.0.b",
            "det.head.box.1.w",
            "det.head.box.1.b",
            "det.head.box.2.w",
            "det.head.box.2.b",
        ] {
            let shape = det.params.get(name).clone();
            *det.params.get_mut(name) = Tensor::zeros(shape.rows, shape.cols);
        }
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let q = t.leaf(crate::autodiff::randn(&mut rng, 4, cfg.d_model, 1.0));
        let seq = TokenSequence::new(&t, q, vec![Role::ObjectQuery; 4]).unwrap();
        let dets = predict_heads(&cfg, &mut t, &b, &seq).unwrap().to_set(&t);
        assert_eq!(dets.class_logits.rows, 4);
        assert_eq!(dets.class_logits.cols, 4, "K+1 columns for K=3");
        let probs = dets.class_probs();
        for v in &probs.data {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for v in &dets.boxes.data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_exclude_domain_query_row() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let queries = build_object_queries(&cfg, &mut t, &b, true);
        assert_eq!(queries.len(), cfg.n_queries + 1);
        let mem = t.leaf(crate::autodiff::randn(&mut rng, 5, cfg.d_model, 0.5));
        let mem_seq = TokenSequence::new(&t, mem, vec![Role::Image; 5]).unwrap();
        let dec = decoder_forward(&cfg, &mut t, &b, &queries, &mem_seq).unwrap();
        let dets = predict_heads(&cfg, &mut t, &b, &dec).unwrap();
        assert_eq!(t.value(dets.class_logits).rows, cfg.n_queries);
        assert_eq!(t.value(dets.boxes).rows, cfg.n_queries);
    }

    #[test]
    fn decoder_rejects_memory_without_image_tokens() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &det.params);
        let queries = build_object_queries(&cfg, &mut t, &b, false);
        let mem = t.leaf(Tensor::zeros(1, cfg.d_model));
        let mem_seq = TokenSequence::new(&t, mem, vec![Role::DomainQuery]).unwrap();
        assert!(decoder_forward(&cfg, &mut t, &b, &queries, &mem_seq).is_err());
    }

    #[test]
    fn forward_is_deterministic_across_rebuilds() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let det = Detector::new(cfg.clone(), &mut rng).unwrap();
        let pixels = rand_pixels(&mut rng, 16, 16);
        let a = det.detect(&pixels, 16, 16).unwrap();
        let b = det.detect(&pixels, 16, 16).unwrap();
        assert_eq!(a, b, "identical weights and input must reproduce bit-for-bit");
    }
}

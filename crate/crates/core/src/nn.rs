//! Layer building blocks on top of the tape: linear maps, multi-head
//! attention, and post-norm transformer layers.
//!
//! Layers are function pairs: an `init_*` that registers parameters under a
//! name prefix, and a forward that looks the same names up through a
//! [`Bound`] view. The tape is rebuilt every step, so forwards are free
//! functions rather than structs holding state.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_linear, Bound, ParamSet, Tape, Tensor, Var};

pub fn init_linear_layer(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
) {
    params.insert(format!("{prefix}.w"), init_linear(rng, out_dim, in_dim));
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, out_dim));
}

/// `x [n x in] -> [n x out]` with weight `[out x in]` and bias row.
pub fn linear(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = t.matmul_tb(x, b.var(&format!("{prefix}.w")));
    t.add_row(h, b.var(&format!("{prefix}.b")))
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(1, dim, 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, dim));
}

pub fn layer_norm(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let g = b.var(&format!("{prefix}.g"));
    let bias = b.var(&format!("{prefix}.b"));
    t.layer_norm_rows(x, g, bias)
}

pub fn init_mha(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d_model: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{name}.w"), init_linear(rng, d_model, d_model));
        params.insert(format!("{prefix}.{name}.b"), Tensor::zeros(1, d_model));
    }
}

/// Multi-head attention; `q_in [n_q x D]` attends over `kv_in [n_kv x D]`.
pub fn mha(t: &mut Tape, b: &Bound, prefix: &str, q_in: Var, kv_in: Var, heads: usize) -> Var {
    mha_masked(t, b, prefix, q_in, kv_in, heads, None)
}

/// Attention with an optional additive score bias `[n_q x n_kv]` (0 where
/// allowed, a large negative value where blocked).
pub fn mha_masked(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    score_bias: Option<&Tensor>,
) -> Var {
    let d_model = t.value(q_in).cols;
    assert_eq!(t.value(kv_in).cols, d_model, "mha width mismatch");
    assert_eq!(d_model % heads, 0, "d_model must divide by head count");
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let bias = score_bias.map(|m| t.leaf(m.clone()));

    let q = linear(t, b, &format!("{prefix}.wq"), q_in);
    let k = linear(t, b, &format!("{prefix}.wk"), kv_in);
    let v = linear(t, b, &format!("{prefix}.wv"), kv_in);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, lo, hi);
        let kh = t.slice_cols(k, lo, hi);
        let vh = t.slice_cols(v, lo, hi);
        let scores = t.matmul_tb(qh, kh);
        let mut scores = t.scale(scores, scale);
        if let Some(bias) = bias {
            scores = t.add(scores, bias);
        }
        let attn = t.softmax_rows(scores);
        head_outs.push(t.matmul(attn, vh));
    }
    let cat = t.concat_cols(&head_outs);
    linear(t, b, &format!("{prefix}.wo"), cat)
}

pub fn init_encoder_layer(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    ffn_dim: usize,
) {
    init_mha(params, rng, &format!("{prefix}.attn"), d_model);
    init_layer_norm(params, &format!("{prefix}.n1"), d_model);
    init_linear_layer(params, rng, &format!("{prefix}.ffn1"), ffn_dim, d_model);
    init_linear_layer(params, rng, &format!("{prefix}.ffn2"), d_model, ffn_dim);
    init_layer_norm(params, &format!("{prefix}.n2"), d_model);
}

/// Post-norm encoder layer: full self-attention then FFN, residuals around both.
pub fn encoder_layer(t: &mut Tape, b: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    encoder_layer_masked(t, b, prefix, x, heads, None)
}

pub fn encoder_layer_masked(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    score_bias: Option<&Tensor>,
) -> Var {
    let a = mha_masked(t, b, &format!("{prefix}.attn"), x, x, heads, score_bias);
    let x1 = t.add(x, a);
    let x1 = layer_norm(t, b, &format!("{prefix}.n1"), x1);
    let f = ffn(t, b, prefix, x1);
    let x2 = t.add(x1, f);
    layer_norm(t, b, &format!("{prefix}.n2"), x2)
}

fn ffn(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(t, b, &format!("{prefix}.ffn1"), x);
    let h = t.relu(h);
    linear(t, b, &format!("{prefix}.ffn2"), h)
}

pub fn init_decoder_layer(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    ffn_dim: usize,
) {
    init_mha(params, rng, &format!("{prefix}.self"), d_model);
    init_layer_norm(params, &format!("{prefix}.n1"), d_model);
    init_mha(params, rng, &format!("{prefix}.cross"), d_model);
    init_layer_norm(params, &format!("{prefix}.n2"), d_model);
    init_linear_layer(params, rng, &format!("{prefix}.ffn1"), ffn_dim, d_model);
    init_linear_layer(params, rng, &format!("{prefix}.ffn2"), d_model, ffn_dim);
    init_layer_norm(params, &format!("{prefix}.n3"), d_model);
}

/// Post-norm decoder layer: query self-attention, cross-attention over
/// `memory`, then FFN, residuals around each.
pub fn decoder_layer(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    q: Var,
    memory: Var,
    heads: usize,
) -> Var {
    let a = mha(t, b, &format!("{prefix}.self"), q, q, heads);
    let q1 = t.add(q, a);
    let q1 = layer_norm(t, b, &format!("{prefix}.n1"), q1);
    let c = mha(t, b, &format!("{prefix}.cross"), q1, memory, heads);
    let q2 = t.add(q1, c);
    let q2 = layer_norm(t, b, &format!("{prefix}.n2"), q2);
    let f = ffn(t, b, prefix, q2);
    let q3 = t.add(q2, f);
    layer_norm(t, b, &format!("{prefix}.n3"), q3)
}

/// Fixed 2D sinusoidal positional encodings for an `h x w` grid, row-major.
/// The first half of each row encodes the y coordinate, the second half x.
pub fn sinusoidal_pos_2d(h: usize, w: usize, d_model: usize) -> Tensor {
    assert_eq!(d_model % 4, 0, "2D sinusoidal encoding needs d_model % 4 == 0");
    let half = d_model / 2;
    let mut out = Tensor::zeros(h * w, d_model);
    let two_pi = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            let py = (y as f64 + 0.5) / h as f64 * two_pi;
            let px = (x as f64 + 0.5) / w as f64 * two_pi;
            for i in 0..half / 2 {
                let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (py / freq).sin();
                row[2 * i + 1] = (py / freq).cos();
                row[half + 2 * i] = (px / freq).sin();
                row[half + 2 * i + 1] = (px / freq).cos();
            }
        }
    }
    out
}

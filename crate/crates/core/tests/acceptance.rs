//! Acceptance gate. One test per criterion; each prints a single
//! `[criterion N] PASS ...` line with the measured quantities (run with
//! `--nocapture` to see them), and the assert message repeats the numbers
//! so failures stay readable. Tolerances are pinned as consts next to the
//! test that uses them.
//!
//! Criteria 6-10 share one cached run matrix (see `matrix()` at the bottom)
//! so the end-to-end criteria stay inside their time budgets.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use cahqp_core::alignment::{
    compute_soft_mask, dqfa_loss, filter_pseudo_labels_detailed, gradient_reversal,
    init_discriminators, tiafa_decoder_loss, tiafa_encoder_loss, total_adversarial_loss,
    AdvLossWeights, AdvParts, DomainLabel, SoftMask,
};
use cahqp_core::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use cahqp_core::detector::{
    backbone_forward, brute_force_assignment, build_object_queries, build_token_sequence,
    decoder_forward, detection_loss, encoder_forward, hungarian_match, init_detector_params,
    predict_heads, solve_min_cost_assignment, Assignment, BoxLabel, DetectionLossWeights,
    DetectionSet, DetectorConfig, ExtraTokens, ForwardOutputs, Role,
};
use cahqp_core::pipeline::{
    adapt_cloud_model, evaluate_map, evaluate_map_bruteforce, pretrain_cloud,
    run_collaboration_cycle_from, CloudModelState, ComponentFlags, CycleReport, ExperimentConfig,
    RankedDetection, ScheduleConfig, Stream,
};
use cahqp_core::synthdata::{build_benchmark, medium_shift_spec, DomainSpec, Image};
use cahqp_core::vpg::{
    cbam_refine, ema_update, feature_to_query, generate_prompt, init_vpg_params, PromptBank,
    VpgConfig, FAST_BANK_PARAM,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data)
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients vs central finite differences, checked for
// every parameter group of the full joint loss (detection + adversarial with
// the reversal layer active, prompt generation on the target branch).
// ---------------------------------------------------------------------------

const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Small but complete model so the scalar-by-scalar sweep stays fast: every
/// stage (backbone, encoder, decoder, heads, embeddings, VPG, discriminators)
/// is present with at least one layer.
fn gradcheck_detector() -> DetectorConfig {
    DetectorConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        n_queries: 4,
        num_classes: 2,
        ffn_dim: 8,
        backbone_channels: vec![8],
        prompt_tokens: 1,
    }
}

fn gradcheck_vpg() -> VpgConfig {
    VpgConfig { components: 3, prompt_dim: 8, prompt_tokens: 1, beta: 0.9, cbam_reduction: 2 }
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::new(size, size);
    for v in img.pixels_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

fn rows_of(src: &Tensor, rows: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * src.cols);
    for &r in rows {
        data.extend_from_slice(src.row(r));
    }
    Tensor::from_vec(rows.len(), src.cols, data)
}

/// Everything the joint loss needs, with the non-differentiable context
/// (assignment, confident-query sets, soft masks) frozen at the base point
/// so finite differences probe exactly what the tape differentiates.
struct GradcheckCase {
    det: DetectorConfig,
    vpg: VpgConfig,
    loss_w: DetectionLossWeights,
    adv_w: AdvLossWeights,
    grl: f64,
    beta: f64,
    source: Image,
    labels: Vec<BoxLabel>,
    target: Image,
    assignment: Assignment,
    source_fg: Vec<usize>,
    target_fg: Vec<usize>,
    source_mask: SoftMask,
    target_mask: SoftMask,
}

fn forward_image(
    det: &DetectorConfig,
    vpg: &VpgConfig,
    t: &mut Tape,
    b: &Bound,
    image: &Image,
    bank: Option<&PromptBank>,
) -> ForwardOutputs {
    let pixels = image.to_pixel_rows();
    let feat = backbone_forward(det, t, b, &pixels, image.h, image.w).unwrap();
    let prompt = bank.map(|bank| {
        let refined = cbam_refine(t, b, &feat);
        let query = feature_to_query(t, b, &refined);
        generate_prompt(vpg, t, b, query, bank).unwrap().projected
    });
    let seq =
        build_token_sequence(det, t, b, &feat, ExtraTokens { prompt, domain_query: true }).unwrap();
    let encoded = encoder_forward(det, t, b, &seq).unwrap();
    let queries = build_object_queries(det, t, b, true);
    let decoded = decoder_forward(det, t, b, &queries, &encoded).unwrap();
    let detections = predict_heads(det, t, b, &decoded).unwrap();
    ForwardOutputs { encoded, decoded, detections }
}

fn frozen_adversarial(
    case: &GradcheckCase,
    t: &mut Tape,
    b: &Bound,
    fwd: &ForwardOutputs,
    label: DomainLabel,
    foreground: &[usize],
    mask: &SoftMask,
) -> Var {
    let enc_dq = fwd.encoded.rows_with_role(t, Role::DomainQuery).unwrap();
    let dec_dq = fwd.decoded.rows_with_role(t, Role::DomainQuery).unwrap();
    let img = fwd.encoded.rows_with_role(t, Role::Image).unwrap();
    let obj = fwd.decoded.rows_with_role(t, Role::ObjectQuery).unwrap();
    let mut parts = AdvParts::default();
    parts.dqfa = Some(dqfa_loss(t, b, enc_dq, dec_dq, label, &case.adv_w, case.grl));
    parts.tiafa_enc = Some(tiafa_encoder_loss(t, b, img, mask, label, case.grl).unwrap());
    let mut weights = vec![0.0; case.det.n_queries];
    for &q in foreground {
        weights[q] = 1.0;
    }
    parts.tiafa_dec = tiafa_decoder_loss(t, b, obj, &weights, label, case.grl).unwrap();
    total_adversarial_loss(t, &parts, &case.adv_w)
}

/// Joint loss split into its detection and adversarial halves. The bank's
/// slow weights are re-synced to the current fast parameters on every call:
/// the prompt path reads slow values but routes gradient to the fast bank,
/// and the two start out equal, so the sync keeps finite differences and the
/// tape talking about the same function.
fn assemble_losses(case: &GradcheckCase, params: &ParamSet) -> (Tape, Bound, Var, Var) {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let bank = PromptBank { slow: params.get(FAST_BANK_PARAM).clone(), beta: case.beta };
    let fwd_s = forward_image(&case.det, &case.vpg, &mut t, &b, &case.source, None);
    let det = detection_loss(&mut t, &fwd_s.detections, &case.labels, &case.assignment, &case.loss_w)
        .unwrap();
    let adv_s = frozen_adversarial(
        case,
        &mut t,
        &b,
        &fwd_s,
        DomainLabel::Source,
        &case.source_fg,
        &case.source_mask,
    );
    let fwd_t = forward_image(&case.det, &case.vpg, &mut t, &b, &case.target, Some(&bank));
    let adv_t = frozen_adversarial(
        case,
        &mut t,
        &b,
        &fwd_t,
        DomainLabel::Target,
        &case.target_fg,
        &case.target_mask,
    );
    let adv_sum = t.add(adv_s, adv_t);
    let adv = t.scale(adv_sum, 0.5);
    (t, b, det, adv)
}

fn loss_values(case: &GradcheckCase, params: &ParamSet) -> (f64, f64) {
    let (t, _, det, adv) = assemble_losses(case, params);
    (t.value(det).item(), t.value(adv).item())
}

fn build_gradcheck_case(params: &mut ParamSet) -> GradcheckCase {
    let det = gradcheck_detector();
    let vpg = gradcheck_vpg();
    let mut r = rng(40);
    *params = init_detector_params(&det, &mut r);
    let bank = init_vpg_params(&vpg, det.d_model, det.d_model, params, &mut r);
    init_discriminators(params, &mut r, det.d_model);
    let loss_w = DetectionLossWeights::default();
    let adv_w = AdvLossWeights {
        dqfa_enc: 0.8,
        dqfa_dec: 1.2,
        tiafa_enc: 0.9,
        tiafa_dec: 1.1,
        tau: 0.3,
        grl_lambda: 0.7,
    };
    let source = random_image(&mut r, 12);
    let target = random_image(&mut r, 12);
    let labels =
        vec![BoxLabel::new(0, 0.3, 0.4, 0.25, 0.2), BoxLabel::new(1, 0.65, 0.6, 0.3, 0.25)];

    // Freeze the data-dependent context at the base point.
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let fwd_s = forward_image(&det, &vpg, &mut t, &b, &source, None);
    let set_s = fwd_s.detections.to_set(&t);
    let assignment = hungarian_match(&set_s, &labels, &loss_w).unwrap();
    let source_fg = assignment.matched_queries();
    let img_s = fwd_s.encoded.rows_with_role(&mut t, Role::Image).unwrap();
    let obj_s = fwd_s.decoded.rows_with_role(&mut t, Role::ObjectQuery).unwrap();
    let source_mask =
        compute_soft_mask(t.value(img_s), &rows_of(t.value(obj_s), &source_fg)).unwrap();
    let fwd_t = forward_image(&det, &vpg, &mut t, &b, &target, Some(&bank));
    let set_t = fwd_t.detections.to_set(&t);
    let kept = filter_pseudo_labels_detailed(&set_t, adv_w.tau).unwrap();
    let target_fg: Vec<usize> = kept.iter().map(|p| p.query).collect();
    assert!(!target_fg.is_empty(), "tau {} kept no target queries", adv_w.tau);
    let img_t = fwd_t.encoded.rows_with_role(&mut t, Role::Image).unwrap();
    let obj_t = fwd_t.decoded.rows_with_role(&mut t, Role::ObjectQuery).unwrap();
    let target_mask =
        compute_soft_mask(t.value(img_t), &rows_of(t.value(obj_t), &target_fg)).unwrap();

    GradcheckCase {
        det,
        vpg,
        loss_w,
        adv_w,
        grl: 0.7,
        beta: bank.beta,
        source,
        labels,
        target,
        assignment,
        source_fg,
        target_fg,
        source_mask,
        target_mask,
    }
}

fn param_group(name: &str) -> &'static str {
    if name.starts_with("det.backbone.") {
        "backbone"
    } else if name.starts_with("det.enc.") {
        "encoder"
    } else if name.starts_with("det.dec.") {
        "decoder"
    } else if name.starts_with("det.head.") {
        "heads"
    } else if name.starts_with("det.") {
        "embeddings"
    } else if name == FAST_BANK_PARAM {
        "vpg-bank"
    } else if name.starts_with("vpg.") {
        "vpg"
    } else if name.starts_with("disc.") {
        "discriminators"
    } else {
        panic!("parameter {name} belongs to no known group");
    }
}

const GROUPS: [&str; 8] = [
    "backbone",
    "encoder",
    "decoder",
    "heads",
    "embeddings",
    "vpg-bank",
    "vpg",
    "discriminators",
];

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let mut params = ParamSet::default();
    let case = build_gradcheck_case(&mut params);

    // Analytic pass: one backward over the joint loss. The reversal layer is
    // part of the graph, so feature parameters see det' - grl * adv' while
    // discriminator parameters see adv' untouched.
    let (mut t, b, det, adv) = assemble_losses(&case, &params);
    let loss = t.add(det, adv);
    let grads = t.backward(loss);
    let analytic = b.gradients(&grads, &t);

    // Finite differences probe the same split by composing the two loss
    // values with the sign the reversal layer induces for the group.
    let names: Vec<String> = params.names().cloned().collect();
    let mut sq_diff: std::collections::BTreeMap<&str, f64> = Default::default();
    let mut sq_ana: std::collections::BTreeMap<&str, f64> = Default::default();
    let mut sq_fd: std::collections::BTreeMap<&str, f64> = Default::default();
    let mut checked = 0usize;
    for name in &names {
        let group = param_group(name);
        let sign = if group == "discriminators" { 1.0 } else { -case.grl };
        let len = params.get(name).data.len();
        for idx in 0..len {
            let orig = params.get(name).data[idx];
            let h = FD_STEP * orig.abs().max(1.0);
            params.get_mut(name).data[idx] = orig + h;
            let (det_p, adv_p) = loss_values(&case, &params);
            params.get_mut(name).data[idx] = orig - h;
            let (det_m, adv_m) = loss_values(&case, &params);
            params.get_mut(name).data[idx] = orig;
            let fd = ((det_p + sign * adv_p) - (det_m + sign * adv_m)) / (2.0 * h);
            let ana = analytic[name].data[idx];
            *sq_diff.entry(group).or_default() += (ana - fd) * (ana - fd);
            *sq_ana.entry(group).or_default() += ana * ana;
            *sq_fd.entry(group).or_default() += fd * fd;
            checked += 1;
        }
    }

    let mut worst = ("", 0.0f64);
    for group in GROUPS {
        assert!(sq_ana.contains_key(group), "group {group} has no parameters");
        let denom = sq_ana[group].sqrt().max(sq_fd[group].sqrt()).max(1e-12);
        let rel = sq_diff[group].sqrt() / denom;
        if rel > worst.1 {
            worst = (group, rel);
        }
    }
    let pass = worst.1 < GRAD_REL_TOL;
    println!(
        "[criterion 1] {} gradient check: {} scalars in {} groups, worst rel err {:.3e} ({}) < {GRAD_REL_TOL:.0e}",
        if pass { "PASS" } else { "FAIL" },
        checked,
        GROUPS.len(),
        worst.1,
        worst.0,
    );
    assert!(pass, "worst group {} rel err {:.3e} exceeds {GRAD_REL_TOL:.0e}", worst.0, worst.1);
}

// ---------------------------------------------------------------------------
// Criterion 2: the gradient reversal layer is the identity forward and
// multiplies the incoming gradient by exactly -strength backward.
// ---------------------------------------------------------------------------

const GRL_TOL: f64 = 1e-10;
const GRL_CASES: usize = 100;

#[test]
fn criterion_02_gradient_reversal_negates_and_scales() {
    let mut r = rng(41);
    let mut worst = 0.0f64;
    for case in 0..GRL_CASES {
        let rows = r.gen_range(1..=4);
        let cols = r.gen_range(1..=5);
        let hidden = r.gen_range(1..=4);
        let strength = if case % 10 == 0 { 0.0 } else { r.gen_range(0.0..2.5) };
        let x = random_tensor(&mut r, rows, cols, 1.5);
        let w = random_tensor(&mut r, cols, hidden, 1.0);

        let grad_through = |reverse: bool| -> (f64, Tensor) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let fed = if reverse { gradient_reversal(&mut t, xv, strength) } else { xv };
            let h = t.matmul(fed, wv);
            let s = t.sigmoid(h);
            let loss = t.mean_all(s);
            let value = t.value(loss).item();
            let grads = t.backward(loss);
            (value, grads.get(xv, &t))
        };

        let (v_rev, g_rev) = grad_through(true);
        let (v_plain, g_plain) = grad_through(false);
        assert_eq!(v_rev, v_plain, "reversal changed the forward value");
        for (a, b) in g_rev.data.iter().zip(g_plain.data.iter()) {
            worst = worst.max((a + strength * b).abs());
        }
    }
    let pass = worst < GRL_TOL;
    println!(
        "[criterion 2] {} reversal layer: {GRL_CASES} cases, forward identity exact, \
         max |g_rev + strength*g| = {worst:.3e} < {GRL_TOL:.0e}",
        if pass { "PASS" } else { "FAIL" },
    );
    assert!(pass, "max deviation {worst:.3e} exceeds {GRL_TOL:.0e}");
}

// ---------------------------------------------------------------------------
// Criterion 3: the assignment solver reaches the exhaustive optimum on every
// random cost matrix. Costs are small dyadic rationals so optimal totals are
// exact in f64 and ties cost nothing either way.
// ---------------------------------------------------------------------------

const MATCHING_CASES: usize = 200;

fn assignment_cost(a: &Assignment, cost: &Tensor) -> f64 {
    a.pairs.iter().map(|&(q, t)| cost.row(q)[t]).sum()
}

#[test]
fn criterion_03_matching_equals_exhaustive_search() {
    let mut r = rng(42);
    for case in 0..MATCHING_CASES {
        let nq = r.gen_range(1..=6);
        let nt = r.gen_range(1..=nq);
        let data: Vec<f64> =
            (0..nq * nt).map(|_| r.gen_range(-128i32..=128) as f64 / 64.0).collect();
        let cost = Tensor::from_vec(nq, nt, data);
        let fast = solve_min_cost_assignment(&cost).unwrap();
        let brute = brute_force_assignment(&cost);
        let (cf, cb) = (assignment_cost(&fast, &cost), assignment_cost(&brute, &cost));
        assert!(
            cf == cb,
            "case {case}: {nq}x{nt} solver cost {cf} != exhaustive {cb}\n{cost:?}"
        );
        assert_eq!(fast.pairs.len(), nt, "case {case}: solver left targets unassigned");
    }
    println!(
        "[criterion 3] PASS matching: {MATCHING_CASES} random cost matrices up to 6x6, \
         solver total equals exhaustive optimum exactly"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: the mAP implementation agrees with a brute-force evaluator on
// small random detection sets.
// ---------------------------------------------------------------------------

const MAP_TOL: f64 = 1e-9;
const MAP_CASES: usize = 25;

fn random_box(r: &mut ChaCha8Rng) -> [f64; 4] {
    [
        r.gen_range(0.15..0.85),
        r.gen_range(0.15..0.85),
        r.gen_range(0.05..0.3),
        r.gen_range(0.05..0.3),
    ]
}

#[test]
fn criterion_04_map_matches_brute_force() {
    let mut r = rng(43);
    let mut worst = 0.0f64;
    for case in 0..MAP_CASES {
        let images = r.gen_range(1..=4);
        let classes = r.gen_range(1..=3);
        let mut preds = Vec::with_capacity(images);
        let mut truth = Vec::with_capacity(images);
        for i in 0..images {
            let n_true = if i == 0 { r.gen_range(1..=3) } else { r.gen_range(0..=3) };
            truth.push(
                (0..n_true)
                    .map(|_| {
                        let b = random_box(&mut r);
                        BoxLabel::new(r.gen_range(0..classes), b[0], b[1], b[2], b[3])
                    })
                    .collect::<Vec<_>>(),
            );
            let n_pred = r.gen_range(0..=5);
            preds.push(
                (0..n_pred)
                    .map(|_| {
                        // Half the predictions hover near a truth box so both
                        // match outcomes appear; the rest are noise.
                        let near = !truth[i].is_empty() && r.gen_bool(0.5);
                        let bbox = if near {
                            let t: &BoxLabel = &truth[i][r.gen_range(0..truth[i].len())];
                            let b = t.xywh();
                            [
                                b[0] + r.gen_range(-0.03..0.03),
                                b[1] + r.gen_range(-0.03..0.03),
                                b[2].max(0.05),
                                b[3].max(0.05),
                            ]
                        } else {
                            random_box(&mut r)
                        };
                        RankedDetection {
                            class_id: r.gen_range(0..classes),
                            confidence: r.gen_range(0.05..1.0),
                            bbox,
                        }
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let fast = evaluate_map(&preds, &truth, 0.5).unwrap();
        let brute = evaluate_map_bruteforce(&preds, &truth, 0.5).unwrap();
        let diff = (fast - brute).abs();
        worst = worst.max(diff);
        assert!(diff < MAP_TOL, "case {case}: mAP {fast} vs brute force {brute}");
    }
    println!(
        "[criterion 4] PASS mAP: {MAP_CASES} random evaluation sets, \
         max |fast - brute force| = {worst:.3e} < {MAP_TOL:.0e}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: structural invariants of the adaptation machinery.
//   (a) prompt mixture weights lie on the simplex and the pre-projection
//       prompt stays inside the convex hull of the bank rows,
//   (b) the EMA bank update is a contraction toward the fast weights with
//       exact behaviour at beta = 0 and beta = 1,
//   (c) the instance soft mask stays in [0, 1],
//   (d) raising the confidence threshold only ever shrinks the kept
//       pseudo-label set,
//   (e) adaptation with every component off is bit-identical to plain
//       supervised fine-tuning: the switches are inert, not just small.
// ---------------------------------------------------------------------------

const SIMPLEX_TOL: f64 = 1e-12;
const EMA_TOL: f64 = 1e-12;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "acceptance-small".into();
    cfg.detector = DetectorConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        n_queries: 6,
        num_classes: 3,
        ffn_dim: 16,
        backbone_channels: vec![8, 16],
        prompt_tokens: 1,
    };
    cfg.edge = DetectorConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        n_queries: 6,
        num_classes: 3,
        ffn_dim: 8,
        backbone_channels: vec![4, 8],
        prompt_tokens: 1,
    };
    cfg.vpg = VpgConfig { components: 4, prompt_dim: 16, prompt_tokens: 1, beta: 0.9, cbam_reduction: 4 };
    cfg.optim.batch_size = 4;
    cfg.schedule =
        ScheduleConfig { pretrain_epochs: 2, settle_epochs: 0, adapt_epochs: 2, edge_epochs: 1 };
    cfg.dataset.source_images = 6;
    cfg.dataset.target_adapt_images = 4;
    cfg.dataset.target_eval_images = 4;
    cfg.dataset.source.image_size = 16;
    cfg.dataset.source.object_density = 1.5;
    cfg.dataset.source.max_objects = 3;
    cfg.dataset.targets = vec![DomainSpec {
        tag: "shift".into(),
        image_size: 16,
        brightness: 0.7,
        noise_std: 0.04,
        object_density: 1.5,
        max_objects: 3,
        seed: 301,
        ..DomainSpec::default()
    }];
    cfg.validate().unwrap();
    cfg
}

fn params_identical(a: &ParamSet, b: &ParamSet) -> bool {
    a.scalar_count() == b.scalar_count() && a.iter().all(|(name, t)| b.get(name) == t)
}

#[test]
fn criterion_05_invariants_hold() {
    let mut r = rng(44);

    // (a) simplex + convex hull.
    let hull_cases = 20;
    for _ in 0..hull_cases {
        let d = 8;
        let comps = r.gen_range(2..=5);
        let vcfg =
            VpgConfig { components: comps, prompt_dim: d, prompt_tokens: 1, beta: 0.9, cbam_reduction: 2 };
        let mut params = ParamSet::default();
        let bank = init_vpg_params(&vcfg, d, d, &mut params, &mut r);
        let mut t = Tape::new();
        let b = Bound::bind(&mut t, &params);
        let q = t.leaf(random_tensor(&mut r, 1, d, 1.2));
        let gp = generate_prompt(&vcfg, &mut t, &b, q, &bank).unwrap();
        let wts = t.value(gp.weights).clone();
        for row in 0..wts.rows {
            let mut sum = 0.0;
            for &w in wts.row(row) {
                assert!(w >= -SIMPLEX_TOL, "negative mixture weight {w}");
                sum += w;
            }
            assert!((sum - 1.0).abs() < SIMPLEX_TOL, "mixture weights sum to {sum}");
        }
        let pre = t.value(gp.pre).clone();
        for row in 0..pre.rows {
            for (dim, &v) in pre.row(row).iter().enumerate() {
                let column: Vec<f64> = (0..bank.slow.rows).map(|k| bank.slow.row(k)[dim]).collect();
                let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    v >= lo - SIMPLEX_TOL && v <= hi + SIMPLEX_TOL,
                    "prompt coordinate {v} escapes the bank hull [{lo}, {hi}]"
                );
            }
        }
    }

    // (b) EMA contraction and endpoints.
    for beta in [0.0, 0.37, 0.9, 1.0] {
        let fast = random_tensor(&mut r, 4, 8, 1.0);
        let slow0 = random_tensor(&mut r, 4, 8, 1.0);
        let mut bank = PromptBank { slow: slow0.clone(), beta };
        ema_update(&fast, &mut bank).unwrap();
        for i in 0..fast.data.len() {
            let expected = beta * slow0.data[i] + (1.0 - beta) * fast.data[i];
            assert!((bank.slow.data[i] - expected).abs() <= EMA_TOL, "EMA formula broke");
            let gap_before = (slow0.data[i] - fast.data[i]).abs();
            let gap_after = (bank.slow.data[i] - fast.data[i]).abs();
            assert!(gap_after <= beta * gap_before + EMA_TOL, "EMA is not a contraction");
        }
        if beta == 0.0 {
            assert_eq!(bank.slow, fast, "beta=0 must snap to the fast weights");
        }
        if beta == 1.0 {
            assert_eq!(bank.slow, slow0, "beta=1 must leave the bank untouched");
        }
    }

    // (c) soft mask range.
    let mask_cases = 50;
    for _ in 0..mask_cases {
        let n = r.gen_range(2..=20);
        let m = r.gen_range(1..=4);
        let tokens = random_tensor(&mut r, n, 8, 2.0);
        let matched = random_tensor(&mut r, m, 8, 2.0);
        let mask = compute_soft_mask(&tokens, &matched).unwrap();
        assert_eq!(mask.psi.len(), n);
        assert!(mask.psi.iter().all(|&p| (0.0..=1.0).contains(&p)), "psi out of [0, 1]");
    }

    // (d) threshold monotonicity.
    let tau_cases = 30;
    let taus = [0.25, 0.4, 0.55, 0.7, 0.85];
    for _ in 0..tau_cases {
        let q = r.gen_range(1..=8);
        let k = r.gen_range(1..=3);
        let set = DetectionSet {
            class_logits: random_tensor(&mut r, q, k + 1, 2.0),
            boxes: Tensor::from_vec(q, 4, (0..q * 4).map(|_| r.gen_range(0.1..0.9)).collect()),
        };
        let kept: Vec<std::collections::BTreeSet<(usize, usize)>> = taus
            .iter()
            .map(|&tau| {
                filter_pseudo_labels_detailed(&set, tau)
                    .unwrap()
                    .into_iter()
                    .map(|p| (p.query, p.label.class_id))
                    .collect()
            })
            .collect();
        for w in kept.windows(2) {
            assert!(w[1].is_subset(&w[0]), "raising tau grew the kept set");
        }
    }

    // (e) all-components-off adaptation == supervised fine-tuning, bitwise.
    let cfg = small_config();
    let (source, mut targets) = build_benchmark(&cfg.dataset).unwrap();
    let target = targets.remove(0);
    let seed = 7;
    let supervised = pretrain_cloud(&cfg, &source, seed).unwrap();
    let mut off = cfg.clone();
    off.schedule.pretrain_epochs = 0;
    off.components = ComponentFlags::none();
    let fresh = pretrain_cloud(&off, &source, seed).unwrap();
    let (adapted, trace) = adapt_cloud_model(&source, &target.adapt, fresh, &off, seed).unwrap();
    assert!(!trace.epoch_losses.is_empty());
    let identical = params_identical(&supervised.params, &adapted.params)
        && supervised.bank.slow == adapted.bank.slow;
    assert!(identical, "components-off adaptation drifted from supervised fine-tuning");

    println!(
        "[criterion 5] PASS invariants: simplex+hull ({hull_cases} prompts), EMA \
         contraction+endpoints, soft-mask range ({mask_cases} masks), threshold \
         monotonicity ({tau_cases} sets x {} taus), components-off bit-identity",
        taus.len(),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6-10: end-to-end adaptation quality on the synthetic benchmark.
//
// All five criteria read from one run matrix. Per seed: pretrain the cloud
// model once on the source split, then run every cell of the component grid
// (plus a no-shift control pair) from a clone of that pretrained state —
// pretraining is source-only, so it is identical across cells by
// construction. Edge retraining is the most expensive stage and its score is
// only asserted for the unadapted and full cells, so only those run the
// scored edge budget; the middle ablation cells are read for pseudo-label
// quality alone and train a one-epoch stub edge instead.
// ---------------------------------------------------------------------------

const MATRIX_SEEDS: [u64; 3] = [0, 1, 2];

const PSEUDO_GAIN_MIN: f64 = 2.0; // criterion 6: full - unadapted, mean pseudo-label mAP
const EDGE_GAIN_MIN: f64 = 1.0; // criterion 7: full - unadapted, mean edge mAP
const ORDER_SLACK: f64 = 0.5; // criterion 8: allowed inversion per grid step
const FULL_OVER_NONE_MIN: f64 = 1.0; // criterion 8: strict full-vs-none gap
const CONTROL_MAX_SHIFT: f64 = 1.0; // criterion 9: |mAP change| on no-shift data

// The run regime. Defaults are tuned for far larger models; this miniature
// detector needs 1e-3 to pretrain to its plateau inside the time budget
// (1e-4 barely moves it, 2e-3 diverges), and the pretrain length is chosen
// so the supervised loss has flattened before any adaptation starts —
// otherwise leftover fine-tuning headroom would be misattributed to
// adaptation. Adaptation itself re-rates the detector path well below the
// pretraining rate so alignment does the moving, not the supervised loss.
const MATRIX_PRETRAIN_EPOCHS: usize = 120;
const MATRIX_SETTLE_EPOCHS: usize = 10;
const MATRIX_ADAPT_EPOCHS: usize = 3;
const SCORED_EDGE_EPOCHS: usize = 120;
const STUB_EDGE_EPOCHS: usize = 1;
const MATRIX_CLOUD_LR: f64 = 1e-3;
const MATRIX_ADAPT_LR: f64 = 1e-4;
const MATRIX_GRL_LAMBDA: f64 = 0.5;
const MATRIX_TAU: f64 = 0.5;
const MATRIX_SOURCE_IMAGES: usize = 192;
const MATRIX_ADAPT_IMAGES: usize = 96;
const MATRIX_EVAL_IMAGES: usize = 32;

fn matrix_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "acceptance".into();
    cfg.optim.cloud_lr = MATRIX_CLOUD_LR;
    cfg.optim.adapt_lr = Some(MATRIX_ADAPT_LR);
    cfg.adversarial.tau = MATRIX_TAU;
    cfg.adversarial.grl_lambda = MATRIX_GRL_LAMBDA;
    cfg.schedule.pretrain_epochs = MATRIX_PRETRAIN_EPOCHS;
    cfg.schedule.settle_epochs = MATRIX_SETTLE_EPOCHS;
    cfg.schedule.adapt_epochs = MATRIX_ADAPT_EPOCHS;
    cfg.schedule.edge_epochs = SCORED_EDGE_EPOCHS;
    cfg.dataset.source_images = MATRIX_SOURCE_IMAGES;
    cfg.dataset.target_adapt_images = MATRIX_ADAPT_IMAGES;
    cfg.dataset.target_eval_images = MATRIX_EVAL_IMAGES;
    cfg.dataset.targets = vec![medium_shift_spec()];
    cfg
}

/// Same images as the source distribution (fresh seed, so fresh draws):
/// what "no domain shift" means for the control.
fn control_dataset_spec(cfg: &ExperimentConfig) -> DomainSpec {
    DomainSpec { tag: "no-shift".into(), seed: 777, ..cfg.dataset.source.clone() }
}

/// One cycle from a clone of the pretrained state, with this cell's flags,
/// adaptation switch, and edge budget.
fn run_matrix_cell(
    pre: &CloudModelState,
    stream: &Stream,
    base: &ExperimentConfig,
    flags: ComponentFlags,
    adapt: bool,
    edge_epochs: usize,
    seed: u64,
) -> CycleReport {
    let mut cfg = base.clone();
    cfg.components = flags;
    cfg.schedule.adapt_epochs = if adapt { base.schedule.adapt_epochs } else { 0 };
    cfg.schedule.edge_epochs = edge_epochs;
    let streams = vec![stream.clone()];
    let (reports, _) =
        run_collaboration_cycle_from(pre.clone(), &streams, &cfg, seed, |_, _| Ok(()))
            .expect("matrix cell failed");
    reports.into_iter().next().expect("one stream in, one report out")
}

struct SeedRow {
    unadapted: CycleReport,
    none: CycleReport,
    dqfa: CycleReport,
    tiafa: CycleReport,
    both: CycleReport,
    full: CycleReport,
    control_unadapted: CycleReport,
    control_full: CycleReport,
}

fn flags(dqfa: bool, tiafa: bool, vpg: bool) -> ComponentFlags {
    ComponentFlags { dqfa, tiafa, vpg }
}

fn build_seed_row(base: &ExperimentConfig, stream: &Stream, control: &Stream, seed: u64) -> SeedRow {
    let pre = pretrain_cloud(base, &stream.source, seed).expect("pretraining failed");
    let cell = |fl: ComponentFlags, adapt: bool, edge: usize| {
        run_matrix_cell(&pre, stream, base, fl, adapt, edge, seed)
    };
    let control_cell = |fl: ComponentFlags, adapt: bool| {
        run_matrix_cell(&pre, control, base, fl, adapt, STUB_EDGE_EPOCHS, seed)
    };
    let row = SeedRow {
        unadapted: cell(flags(false, false, false), false, SCORED_EDGE_EPOCHS),
        none: cell(flags(false, false, false), true, STUB_EDGE_EPOCHS),
        dqfa: cell(flags(true, false, false), true, STUB_EDGE_EPOCHS),
        tiafa: cell(flags(false, true, false), true, STUB_EDGE_EPOCHS),
        both: cell(flags(true, true, false), true, STUB_EDGE_EPOCHS),
        full: cell(flags(true, true, true), true, SCORED_EDGE_EPOCHS),
        control_unadapted: control_cell(flags(false, false, false), false),
        control_full: control_cell(flags(true, true, true), true),
    };
    println!(
        "[matrix] seed {seed}: pseudo mAP unadapted {:.2} none {:.2} dqfa {:.2} tiafa {:.2} \
         dqfa+tiafa {:.2} full {:.2} | edge mAP {:.2} -> {:.2} | control {:.2} -> {:.2}",
        row.unadapted.pseudo_label_map,
        row.none.pseudo_label_map,
        row.dqfa.pseudo_label_map,
        row.tiafa.pseudo_label_map,
        row.both.pseudo_label_map,
        row.full.pseudo_label_map,
        row.unadapted.edge_map,
        row.full.edge_map,
        row.control_unadapted.pseudo_label_map,
        row.control_full.pseudo_label_map,
    );
    row
}

fn matrix() -> &'static Vec<SeedRow> {
    static MATRIX: std::sync::OnceLock<Vec<SeedRow>> = std::sync::OnceLock::new();
    MATRIX.get_or_init(|| {
        let base = matrix_config();
        let (source, mut targets) = build_benchmark(&base.dataset).unwrap();
        let mut control_cfg = base.clone();
        control_cfg.dataset.targets = vec![control_dataset_spec(&base)];
        let (_, mut control_targets) = build_benchmark(&control_cfg.dataset).unwrap();
        let stream = Stream { source: source.clone(), target: targets.remove(0) };
        let control = Stream { source, target: control_targets.remove(0) };
        MATRIX_SEEDS
            .iter()
            .map(|&seed| build_seed_row(&base, &stream, &control, seed))
            .collect()
    })
}

fn mean_of(get: impl Fn(&SeedRow) -> f64) -> f64 {
    let rows = matrix();
    rows.iter().map(&get).sum::<f64>() / rows.len() as f64
}

#[test]
fn criterion_06_adaptation_beats_unadapted_pseudo_labels() {
    let full = mean_of(|r| r.full.pseudo_label_map);
    let unadapted = mean_of(|r| r.unadapted.pseudo_label_map);
    let gain = full - unadapted;
    let pass = gain >= PSEUDO_GAIN_MIN;
    println!(
        "[criterion 6] {} pseudo-label mAP: full {full:.2} vs unadapted {unadapted:.2}, \
         gain {gain:+.2} (need >= {PSEUDO_GAIN_MIN:+.1}), mean of {} seeds",
        if pass { "PASS" } else { "FAIL" },
        MATRIX_SEEDS.len(),
    );
    assert!(pass, "adaptation gained {gain:+.2} pseudo-label mAP, need {PSEUDO_GAIN_MIN:+.1}");
}

#[test]
fn criterion_07_adapted_labels_train_a_better_edge_model() {
    let full = mean_of(|r| r.full.edge_map);
    let unadapted = mean_of(|r| r.unadapted.edge_map);
    let gain = full - unadapted;
    let pass = gain >= EDGE_GAIN_MIN;
    println!(
        "[criterion 7] {} edge mAP: retrained on adapted labels {full:.2} vs unadapted \
         labels {unadapted:.2}, gain {gain:+.2} (need >= {EDGE_GAIN_MIN:+.1})",
        if pass { "PASS" } else { "FAIL" },
    );
    assert!(pass, "edge model gained {gain:+.2} mAP from adapted labels, need {EDGE_GAIN_MIN:+.1}");
}

#[test]
fn criterion_08_component_grid_orders_correctly() {
    let none = mean_of(|r| r.none.pseudo_label_map);
    let dqfa = mean_of(|r| r.dqfa.pseudo_label_map);
    let tiafa = mean_of(|r| r.tiafa.pseudo_label_map);
    let both = mean_of(|r| r.both.pseudo_label_map);
    let full = mean_of(|r| r.full.pseudo_label_map);
    let steps = [
        ("none <= dqfa", none, dqfa),
        ("none <= tiafa", none, tiafa),
        ("max(dqfa,tiafa) <= dqfa+tiafa", dqfa.max(tiafa), both),
        ("dqfa+tiafa <= full", both, full),
    ];
    let mut failures = Vec::new();
    for (label, lo, hi) in steps {
        if lo > hi + ORDER_SLACK {
            failures.push(format!("{label} violated: {lo:.2} > {hi:.2} + {ORDER_SLACK}"));
        }
    }
    if full - none < FULL_OVER_NONE_MIN {
        failures.push(format!(
            "full {full:.2} must beat none {none:.2} by >= {FULL_OVER_NONE_MIN:+.1}"
        ));
    }
    let pass = failures.is_empty();
    println!(
        "[criterion 8] {} grid pseudo-label mAP: none {none:.2}, dqfa {dqfa:.2}, tiafa \
         {tiafa:.2}, dqfa+tiafa {both:.2}, full {full:.2} (slack {ORDER_SLACK}, full-none \
         {:+.2}){}{}",
        if pass { "PASS" } else { "FAIL" },
        full - none,
        if pass { "" } else { " — " },
        failures.join("; "),
    );
    assert!(pass, "{}", failures.join("; "));
}

#[test]
fn criterion_09_no_shift_control_stays_flat() {
    let rows = matrix();
    let deltas: Vec<f64> = rows
        .iter()
        .map(|r| r.control_full.pseudo_label_map - r.control_unadapted.pseudo_label_map)
        .collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let pass = mean_delta.abs() < CONTROL_MAX_SHIFT;
    println!(
        "[criterion 9] {} no-shift control: mAP change {mean_delta:+.2} mean over {} seeds \
         (per seed {:?}), need |change| < {CONTROL_MAX_SHIFT}",
        if pass { "PASS" } else { "FAIL" },
        deltas.len(),
        deltas.iter().map(|d| format!("{d:+.2}")).collect::<Vec<_>>(),
    );
    assert!(pass, "no-shift adaptation moved pseudo-label mAP by {mean_delta:+.2}");
}

#[test]
fn criterion_10_repeated_run_is_bit_identical() {
    let rows = matrix();
    let seed = MATRIX_SEEDS[0];
    let base = matrix_config();
    let (source, mut targets) = build_benchmark(&base.dataset).unwrap();
    let stream = Stream { source, target: targets.remove(0) };
    // Full rerun from nothing: fresh pretrain, fresh cells.
    let pre = pretrain_cloud(&base, &stream.source, seed).expect("pretraining failed");
    let unadapted =
        run_matrix_cell(&pre, &stream, &base, flags(false, false, false), false, SCORED_EDGE_EPOCHS, seed);
    let full =
        run_matrix_cell(&pre, &stream, &base, flags(true, true, true), true, SCORED_EDGE_EPOCHS, seed);
    let first = &rows[0];
    let pass = unadapted == first.unadapted && full == first.full;
    println!(
        "[criterion 10] {} determinism: rerun of seed {seed} reproduced both cycle reports \
         {}(pseudo {:.4}/{:.4}, edge {:.4}/{:.4}, kept {}/{})",
        if pass { "PASS" } else { "FAIL" },
        if pass { "exactly " } else { "INEXACTLY " },
        full.pseudo_label_map,
        first.full.pseudo_label_map,
        full.edge_map,
        first.full.edge_map,
        full.pseudo_label_count,
        first.full.pseudo_label_count,
    );
    assert_eq!(unadapted, first.unadapted, "unadapted cycle report changed between runs");
    assert_eq!(full, first.full, "full cycle report changed between runs");
}

//! Training loops: supervised fine-tuning, joint source/target adaptation,
//! pseudo-label generation with the adapted model, and edge retraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    compute_soft_mask, dqfa_loss, filter_pseudo_labels_detailed, grl_schedule,
    init_discriminators, tiafa_decoder_loss, tiafa_encoder_loss, total_adversarial_loss,
    AdvLossWeights, AdvParts, DomainLabel, PseudoLabel, SoftMask,
};
use crate::autodiff::{AdamW, AdamWConfig, Bound, ParamSet, Tape, Tensor, Var};
use crate::detector::{
    backbone_forward, build_object_queries, build_token_sequence, decoder_forward,
    detection_loss, encoder_forward, hungarian_match, init_detector_params, predict_heads,
    BoxLabel, DetectionLossWeights, DetectionSet, DetectorConfig, ExtraTokens, ForwardOutputs,
    Role,
};
use crate::error::{Error, Result};
use crate::synthdata::{DomainDataset, DomainRole, Image};
use crate::vpg::{
    cbam_refine, ema_update, feature_to_query, generate_prompt, init_vpg_params, PromptBank,
    VpgConfig, FAST_BANK_PARAM,
};

use super::eval::{evaluate_map, rank_detections, rank_pseudo_labels, MAP_IOU_THRESHOLD};
use super::{
    config_hash, CloudModelState, ComponentFlags, CycleReport, ExperimentConfig, Stream,
};

// Independent RNG lanes per purpose, all derived from one run seed, so a
// code path consuming one lane can never shift the draws of another.
const LANE_CLOUD_INIT: u64 = 0;
const LANE_SOURCE_SHUFFLE: u64 = 1;
const LANE_TARGET_SHUFFLE: u64 = 2;
const LANE_EDGE_INIT: u64 = 3;
const LANE_EDGE_SHUFFLE: u64 = 4;
const LANE_SETTLE_SHUFFLE: u64 = 5;

fn lane_rng(seed: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

/// Fresh cloud model: detector, VPG, and discriminators in one parameter
/// set, with the per-prefix optimizer of the run.
pub fn init_cloud_state(cfg: &ExperimentConfig, seed: u64) -> Result<CloudModelState> {
    cfg.validate()?;
    let mut rng = lane_rng(seed, LANE_CLOUD_INIT);
    let mut params = init_detector_params(&cfg.detector, &mut rng);
    let bank = init_vpg_params(
        &cfg.vpg,
        cfg.detector.d_model,
        cfg.detector.d_model,
        &mut params,
        &mut rng,
    );
    init_discriminators(&mut params, &mut rng, cfg.detector.d_model);
    let mut opt_cfg = AdamWConfig::uniform(cfg.optim.cloud_lr)
        .with_group("vpg.", cfg.optim.vpg_lr)
        .with_group("disc.", cfg.optim.disc_lr);
    opt_cfg.weight_decay = cfg.optim.weight_decay;
    Ok(CloudModelState {
        params,
        bank,
        opt: AdamW::new(opt_cfg),
        cycle: 0,
        config_hash: config_hash(cfg)?,
    })
}

pub fn init_edge_params(cfg: &ExperimentConfig, seed: u64) -> ParamSet {
    init_detector_params(&cfg.edge, &mut lane_rng(seed, LANE_EDGE_INIT))
}

/// One image through the cloud model: backbone, optional VPG prompt from the
/// same backbone features, token assembly, encoder, decoder, heads.
fn cloud_forward(
    det: &DetectorConfig,
    vpg: Option<&VpgConfig>,
    t: &mut Tape,
    b: &Bound,
    bank: Option<&PromptBank>,
    image: &Image,
    use_prompt: bool,
    domain_query: bool,
) -> Result<ForwardOutputs> {
    let pixels = image.to_pixel_rows();
    let feat = backbone_forward(det, t, b, &pixels, image.h, image.w)?;
    let prompt = if use_prompt {
        let vpg = vpg.ok_or_else(|| Error::Config("prompt generation needs VPG settings".into()))?;
        let bank =
            bank.ok_or_else(|| Error::Config("prompt generation needs the prompt bank".into()))?;
        let refined = cbam_refine(t, b, &feat);
        let query = feature_to_query(t, b, &refined);
        Some(generate_prompt(vpg, t, b, query, bank)?.projected)
    } else {
        None
    };
    let seq = build_token_sequence(det, t, b, &feat, ExtraTokens { prompt, domain_query })?;
    let encoded = encoder_forward(det, t, b, &seq)?;
    let queries = build_object_queries(det, t, b, domain_query);
    let decoded = decoder_forward(det, t, b, &queries, &encoded)?;
    let detections = predict_heads(det, t, b, &decoded)?;
    Ok(ForwardOutputs { encoded, decoded, detections })
}

fn select_value_rows(src: &Tensor, rows: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * src.cols);
    for &r in rows {
        data.extend_from_slice(src.row(r));
    }
    Tensor::from_vec(rows.len(), src.cols, data)
}

/// Adversarial terms of one sample. `foreground` lists the decoder queries
/// treated as instances: Hungarian matches on source, confident predictions
/// on target. The soft mask is computed on detached values.
#[allow(clippy::too_many_arguments)]
fn sample_adversarial(
    t: &mut Tape,
    b: &Bound,
    fwd: &ForwardOutputs,
    label: DomainLabel,
    foreground: &[usize],
    flags: ComponentFlags,
    w: &AdvLossWeights,
    grl: f64,
    n_queries: usize,
) -> Result<AdvParts> {
    let mut parts = AdvParts::default();
    if flags.dqfa {
        let enc_dq = fwd.encoded.rows_with_role(t, Role::DomainQuery).ok_or_else(|| {
            Error::InvalidInput("global alignment needs the encoder domain token".into())
        })?;
        let dec_dq = fwd.decoded.rows_with_role(t, Role::DomainQuery).ok_or_else(|| {
            Error::InvalidInput("global alignment needs the decoder domain token".into())
        })?;
        parts.dqfa = Some(dqfa_loss(t, b, enc_dq, dec_dq, label, w, grl));
    }
    if flags.tiafa {
        let img = fwd
            .encoded
            .rows_with_role(t, Role::Image)
            .ok_or_else(|| Error::InvalidInput("encoder output has no image tokens".into()))?;
        let obj = fwd
            .decoded
            .rows_with_role(t, Role::ObjectQuery)
            .ok_or_else(|| Error::InvalidInput("decoder output has no object queries".into()))?;
        let mask: Option<SoftMask> = {
            let matched = select_value_rows(t.value(obj), foreground);
            compute_soft_mask(t.value(img), &matched)
        };
        if let Some(mask) = mask {
            parts.tiafa_enc = Some(tiafa_encoder_loss(t, b, img, &mask, label, grl)?);
        }
        let mut weights = vec![0.0; n_queries];
        for &q in foreground {
            weights[q] = 1.0;
        }
        parts.tiafa_dec = tiafa_decoder_loss(t, b, obj, &weights, label, grl)?;
    }
    Ok(parts)
}

/// Divergence guard: a step never starts from non-finite parameters (the
/// optimizer may have blown them up on the previous step).
fn check_finite(params: &ParamSet, step: usize) -> Result<()> {
    for (name, t) in params.iter() {
        if !t.all_finite() {
            return Err(Error::NonFinite { step, context: format!("parameter {name}") });
        }
    }
    Ok(())
}

fn mean_terms(t: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for v in &terms[1..] {
        acc = t.add(acc, *v);
    }
    t.scale(acc, 1.0 / terms.len() as f64)
}

struct StepConfig<'a> {
    det: &'a DetectorConfig,
    vpg: Option<&'a VpgConfig>,
    flags: ComponentFlags,
    loss_w: &'a DetectionLossWeights,
    adv_w: &'a AdvLossWeights,
    grl: f64,
}

/// One optimizer step over one source batch and one target batch. The
/// detection loss covers source samples only; adversarial terms cover both
/// domains with their true labels. Returns the step loss.
fn train_step(
    sc: &StepConfig,
    params: &mut ParamSet,
    opt: &mut AdamW,
    mut bank: Option<&mut PromptBank>,
    source: &[(&Image, &[BoxLabel])],
    target: &[&Image],
    step_index: usize,
) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::InvalidInput("training step needs a source batch".into()));
    }
    check_finite(params, step_index)?;
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let bank_read: Option<&PromptBank> = bank.as_deref();
    let adversarial = sc.flags.dqfa || sc.flags.tiafa;
    let mut det_terms = Vec::with_capacity(source.len());
    let mut adv_terms = Vec::new();
    for (image, labels) in source {
        let fwd =
            cloud_forward(sc.det, sc.vpg, &mut t, &b, bank_read, image, false, sc.flags.dqfa)?;
        let set = fwd.detections.to_set(&t);
        let assignment = hungarian_match(&set, labels, sc.loss_w)?;
        det_terms.push(detection_loss(&mut t, &fwd.detections, labels, &assignment, sc.loss_w)?);
        if adversarial {
            let foreground = assignment.matched_queries();
            let parts = sample_adversarial(
                &mut t,
                &b,
                &fwd,
                DomainLabel::Source,
                &foreground,
                sc.flags,
                sc.adv_w,
                sc.grl,
                sc.det.n_queries,
            )?;
            adv_terms.push(total_adversarial_loss(&mut t, &parts, sc.adv_w));
        }
    }
    for image in target {
        let fwd = cloud_forward(
            sc.det,
            sc.vpg,
            &mut t,
            &b,
            bank_read,
            image,
            sc.flags.vpg,
            sc.flags.dqfa,
        )?;
        if adversarial {
            let set = fwd.detections.to_set(&t);
            let kept = filter_pseudo_labels_detailed(&set, sc.adv_w.tau)?;
            let foreground: Vec<usize> = kept.iter().map(|p| p.query).collect();
            let parts = sample_adversarial(
                &mut t,
                &b,
                &fwd,
                DomainLabel::Target,
                &foreground,
                sc.flags,
                sc.adv_w,
                sc.grl,
                sc.det.n_queries,
            )?;
            adv_terms.push(total_adversarial_loss(&mut t, &parts, sc.adv_w));
        }
    }
    let mut loss = mean_terms(&mut t, &det_terms);
    if !adv_terms.is_empty() {
        let adv = mean_terms(&mut t, &adv_terms);
        loss = t.add(loss, adv);
    }
    let value = t.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { step: step_index, context: "training step loss".into() });
    }
    let grads = t.backward(loss);
    let grad_map = b.gradients(&grads, &t);
    opt.step(params, &grad_map);
    if sc.flags.vpg {
        let bank = bank.as_deref_mut().expect("vpg flag implies a bank");
        ema_update(params.get(FAST_BANK_PARAM), bank)?;
    }
    Ok(value)
}

/// Plain supervised training over (image, labels) pairs; per-epoch mean
/// losses come back for trajectory checks.
pub(crate) fn train_supervised(
    det: &DetectorConfig,
    loss_w: &DetectionLossWeights,
    params: &mut ParamSet,
    opt: &mut AdamW,
    pairs: &[(&Image, &[BoxLabel])],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    lane: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("supervised training needs data".into()));
    }
    let adv_w = AdvLossWeights::default();
    let sc = StepConfig {
        det,
        vpg: None,
        flags: ComponentFlags::none(),
        loss_w,
        adv_w: &adv_w,
        grl: 0.0,
    };
    let mut rng = lane_rng(seed, lane);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut step_index = 0;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&Image, &[BoxLabel])> = chunk.iter().map(|&i| pairs[i]).collect();
            sum += train_step(&sc, params, opt, None, &batch, &[], step_index)?;
            steps += 1;
            step_index += 1;
        }
        epoch_losses.push(sum / steps as f64);
    }
    Ok(epoch_losses)
}

fn supervised_pairs(source: &DomainDataset) -> Result<Vec<(&Image, &[BoxLabel])>> {
    source
        .samples
        .iter()
        .map(|s| {
            let ann = s.annotations.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("sample {} lacks annotations", s.id))
            })?;
            Ok((&s.image, ann.training_labels()?))
        })
        .collect()
}

/// Supervised source training of a fresh cloud model — the stand-in for the
/// large pre-trained model a real deployment would start from.
pub fn pretrain_cloud(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    seed: u64,
) -> Result<CloudModelState> {
    source.validate()?;
    let mut state = init_cloud_state(cfg, seed)?;
    let pairs = supervised_pairs(source)?;
    train_supervised(
        &cfg.detector,
        &cfg.loss,
        &mut state.params,
        &mut state.opt,
        &pairs,
        cfg.schedule.pretrain_epochs,
        cfg.optim.batch_size,
        seed,
        LANE_SOURCE_SHUFFLE,
    )?;
    // Optional hand-off phase: keep training supervised, but already at the
    // adaptation rate, until the model is settled there. Without it, a lower
    // adapt_lr acts as a learning-rate decay and its refinement gets
    // misread as an adaptation effect.
    if cfg.schedule.settle_epochs > 0 {
        state.opt.set_group_lr("", cfg.optim.effective_adapt_lr());
        train_supervised(
            &cfg.detector,
            &cfg.loss,
            &mut state.params,
            &mut state.opt,
            &pairs,
            cfg.schedule.settle_epochs,
            cfg.optim.batch_size,
            seed,
            LANE_SETTLE_SHUFFLE,
        )?;
    }
    Ok(state)
}

/// Per-adaptation diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptTrace {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Joint source/target adaptation. Each step pairs one source batch (ground
/// truth, detection loss) with one target batch (adversarial terms only);
/// the shorter target split cycles. With every component flag off this is
/// exactly supervised fine-tuning on the source split.
pub fn adapt_cloud_model(
    source: &DomainDataset,
    target: &DomainDataset,
    mut state: CloudModelState,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(CloudModelState, AdaptTrace)> {
    source.validate()?;
    target.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("adaptation needs non-empty source and target".into()));
    }
    if source.role != DomainRole::Source || target.role != DomainRole::Target {
        return Err(Error::InvalidInput("adaptation expects (source, target) roles".into()));
    }
    state.opt.set_group_lr("", cfg.optim.effective_adapt_lr());
    let pairs = supervised_pairs(source)?;
    let target_images: Vec<&Image> = target.samples.iter().map(|s| &s.image).collect();
    let flags = cfg.components;
    let batch = cfg.optim.batch_size;
    let epochs = cfg.schedule.adapt_epochs;
    let steps_per_epoch = pairs.len().div_ceil(batch);
    let total_steps = epochs * steps_per_epoch;
    let mut rng_source = lane_rng(seed, LANE_SOURCE_SHUFFLE);
    let mut rng_target = lane_rng(seed, LANE_TARGET_SHUFFLE);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut step_index = 0;
    for _ in 0..epochs {
        let mut order_s: Vec<usize> = (0..pairs.len()).collect();
        order_s.shuffle(&mut rng_source);
        let mut order_t: Vec<usize> = (0..target_images.len()).collect();
        order_t.shuffle(&mut rng_target);
        let mut target_cycle = order_t.iter().cycle();
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order_s.chunks(batch) {
            let src_batch: Vec<(&Image, &[BoxLabel])> =
                chunk.iter().map(|&i| pairs[i]).collect();
            let tgt_batch: Vec<&Image> = if flags.any() {
                target_cycle.by_ref().take(batch).map(|&i| target_images[i]).collect()
            } else {
                Vec::new()
            };
            let sc = StepConfig {
                det: &cfg.detector,
                vpg: Some(&cfg.vpg),
                flags,
                loss_w: &cfg.loss,
                adv_w: &cfg.adversarial,
                grl: grl_schedule(step_index, total_steps, cfg.adversarial.grl_lambda),
            };
            sum += train_step(
                &sc,
                &mut state.params,
                &mut state.opt,
                Some(&mut state.bank),
                &src_batch,
                &tgt_batch,
                step_index,
            )?;
            steps += 1;
            step_index += 1;
        }
        epoch_losses.push(sum / steps as f64);
    }
    state.cycle += 1;
    Ok((state, AdaptTrace { epoch_losses, steps: total_steps }))
}

/// Filtered detections of the adapted model on each target sample. Inference
/// mirrors the training-time forward (prompts and domain token included when
/// their components are on); parameters are read-only.
pub fn generate_pseudo_labels(
    state: &CloudModelState,
    cfg: &ExperimentConfig,
    target: &DomainDataset,
    tau: f64,
) -> Result<Vec<(String, Vec<PseudoLabel>)>> {
    let flags = cfg.components;
    target
        .samples
        .iter()
        .map(|s| {
            let mut t = Tape::new();
            let b = Bound::bind(&mut t, &state.params);
            let fwd = cloud_forward(
                &cfg.detector,
                Some(&cfg.vpg),
                &mut t,
                &b,
                Some(&state.bank),
                &s.image,
                flags.vpg,
                flags.dqfa,
            )?;
            let set = fwd.detections.to_set(&t);
            Ok((s.id.clone(), filter_pseudo_labels_detailed(&set, tau)?))
        })
        .collect()
}

/// Supervised training of the edge detector on pseudo-labels as if they
/// were ground truth. A pseudo-label set with no boxes at all leaves the
/// model untouched.
pub fn retrain_edge_model(
    mut edge_params: ParamSet,
    data: &[(&Image, Vec<BoxLabel>)],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>)> {
    if data.is_empty() || data.iter().all(|(_, labels)| labels.is_empty()) {
        return Ok((edge_params, Vec::new()));
    }
    let pairs: Vec<(&Image, &[BoxLabel])> =
        data.iter().map(|(image, labels)| (*image, labels.as_slice())).collect();
    let mut opt_cfg = AdamWConfig::uniform(cfg.optim.cloud_lr);
    opt_cfg.weight_decay = cfg.optim.weight_decay;
    let mut opt = AdamW::new(opt_cfg);
    let losses = train_supervised(
        &cfg.edge,
        &cfg.loss,
        &mut edge_params,
        &mut opt,
        &pairs,
        cfg.schedule.edge_epochs,
        cfg.optim.batch_size,
        seed,
        LANE_EDGE_SHUFFLE,
    )?;
    Ok((edge_params, losses))
}

fn dataset_eval_labels(ds: &DomainDataset) -> Vec<Vec<BoxLabel>> {
    ds.samples
        .iter()
        .map(|s| s.annotations.as_ref().map(|a| a.eval_labels().to_vec()).unwrap_or_default())
        .collect()
}

/// Plain detector inference over a dataset (no prompts, no domain token) —
/// how the edge model runs in deployment.
fn detect_dataset(
    det: &DetectorConfig,
    params: &ParamSet,
    ds: &DomainDataset,
) -> Result<Vec<DetectionSet>> {
    ds.samples
        .iter()
        .map(|s| {
            let mut t = Tape::new();
            let b = Bound::bind(&mut t, params);
            let fwd = cloud_forward(det, None, &mut t, &b, None, &s.image, false, false)?;
            Ok(fwd.detections.to_set(&t))
        })
        .collect()
}

/// One full cycle per stream: adapt the cloud model, pseudo-label the target,
/// retrain a fresh edge model on the adaptation half, and score both label
/// quality and the edge model on the held-out half.
pub fn run_collaboration_cycle_from<F>(
    mut state: CloudModelState,
    streams: &[Stream],
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_cycle: F,
) -> Result<(Vec<CycleReport>, CloudModelState)>
where
    F: FnMut(&CloudModelState, &CycleReport) -> Result<()>,
{
    if streams.is_empty() {
        return Err(Error::InvalidInput("at least one stream is required".into()));
    }
    let tau = cfg.adversarial.tau;
    let mut reports = Vec::with_capacity(streams.len());
    for stream in streams {
        stream.target.validate()?;
        let (next, _trace) =
            adapt_cloud_model(&stream.source, &stream.target.adapt, state, cfg, seed)?;
        state = next;

        let pseudo_adapt = generate_pseudo_labels(&state, cfg, &stream.target.adapt, tau)?;
        let pseudo_eval = generate_pseudo_labels(&state, cfg, &stream.target.eval, tau)?;
        let truth = dataset_eval_labels(&stream.target.eval);
        let ranked: Vec<_> =
            pseudo_eval.iter().map(|(_, labels)| rank_pseudo_labels(labels)).collect();
        let pseudo_label_map = evaluate_map(&ranked, &truth, MAP_IOU_THRESHOLD)?;

        let edge_seed = seed.wrapping_add(state.cycle as u64);
        let edge_data: Vec<(&Image, Vec<BoxLabel>)> = stream
            .target
            .adapt
            .samples
            .iter()
            .zip(&pseudo_adapt)
            .map(|(s, (_, labels))| (&s.image, labels.iter().map(|p| p.label).collect()))
            .collect();
        let pseudo_label_count = pseudo_adapt.iter().map(|(_, l)| l.len()).sum();
        let edge_init = init_edge_params(cfg, edge_seed);
        let (edge_params, _) = retrain_edge_model(edge_init, &edge_data, cfg, edge_seed)?;
        let edge_sets = detect_dataset(&cfg.edge, &edge_params, &stream.target.eval)?;
        let edge_ranked: Vec<_> = edge_sets.iter().map(rank_detections).collect();
        let edge_map = evaluate_map(&edge_ranked, &truth, MAP_IOU_THRESHOLD)?;

        let report = CycleReport {
            cycle: state.cycle,
            stream: stream.target.adapt.tag.clone(),
            seed,
            flags: cfg.components,
            tau,
            pseudo_label_count,
            pseudo_label_map,
            edge_map,
        };
        report.validate()?;
        on_cycle(&state, &report)?;
        reports.push(report);
    }
    Ok((reports, state))
}

/// Pretrain on the first stream's source, then run every cycle.
pub fn run_collaboration_cycle(
    streams: &[Stream],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<CycleReport>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one stream is required".into()))?;
    let state = pretrain_cloud(cfg, &first.source, seed)?;
    run_collaboration_cycle_from(state, streams, cfg, seed, |_, _| Ok(()))
        .map(|(reports, _)| reports)
}

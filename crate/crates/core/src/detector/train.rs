//! Single-threaded training loops for the base and fine-tuning stages.

use std::collections::HashMap;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{assign_rpn_targets, generate_anchors, generate_proposals, ROI_CODER_WEIGHTS};
use super::config::{Component, DetectorConfig, Stage};
use super::model::{
    backbone_backward, backbone_forward, predictor_forward, roi_features_backward, roi_features_forward,
    rpn_backward, rpn_forward, softmax_rows, BackboneForward, DetectorParams, RoiSampling,
};
use super::{DetectorState, RpnRoiStats};
use crate::contrastive_head::{ContrastiveHead, NORM_EPS};
use crate::cpe::{cpe_loss_with_grad, total_finetune_loss, CpeConfig, ProposalRecord};
use crate::data::{DetectionDataset, ImageRecord};
use crate::error::{FsceError, Result};
use crate::geometry::{match_proposals, BBox, BoxCoder};
use crate::nn::{bce_with_logit, smooth_l1, FeatureMap, Tensor};

/// Transition point of the smoothed-L1 box losses.
pub const SMOOTH_L1_BETA: f64 = 1.0;

const PARAM_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

pub(crate) fn param_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PARAM_STREAM);
    rng
}

fn step_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM);
    rng
}

/// Loss breakdown of one optimization step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub learning_rate: f64,
    /// Objectness plus anchor box regression.
    pub rpn: f64,
    pub cls: f64,
    pub reg: f64,
    pub cpe: f64,
    pub lambda: f64,
    pub total: f64,
    pub sampled_rois: usize,
    pub foreground_rois: usize,
    /// Foreground RoIs that entered the contrastive batch.
    pub cpe_batch: usize,
    /// Post-NMS proposals at or above the foreground IoU, before ground truth is appended.
    pub foreground_proposals: usize,
    pub positive_anchors: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: DetectorState,
    /// Step-averaged proposal counts; `loss_components` holds the per-step log.
    pub stats: RpnRoiStats,
}

impl TrainOutcome {
    pub fn log(&self) -> &[StepLosses] {
        &self.stats.loss_components
    }
}

struct StepContext<'a> {
    cfg: &'a DetectorConfig,
    anchors: Vec<BBox>,
    class_index: HashMap<u32, usize>,
    background: usize,
    cpe: Option<CpeConfig>,
}

/// RoIs sampled from one image.
struct ImageRois {
    sampling: RoiSampling,
    labels: Vec<usize>,
    class_ids: Vec<Option<u32>>,
    ious: Vec<f64>,
    reg_targets: Vec<Option<[f64; 4]>>,
}

struct ImagePass {
    backbone: Option<BackboneForward>,
    features: FeatureMap,
    rpn: super::model::RpnForward,
    d_objectness: Array2<f32>,
    d_deltas: Array2<f32>,
    rois: ImageRois,
}

/// Picks at most `batch * fg_fraction` foreground and fills the rest with background.
fn sample_rois<R: Rng + ?Sized>(fg: &mut Vec<usize>, bg: &mut Vec<usize>, cfg: &DetectorConfig, rng: &mut R) -> Vec<usize> {
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = (cfg.roi_batch_size as f64 * cfg.roi_fg_fraction).floor() as usize;
    let n_fg = fg.len().min(max_fg);
    let n_bg = bg.len().min(cfg.roi_batch_size - n_fg);
    let mut picked: Vec<usize> = fg[..n_fg].to_vec();
    picked.extend_from_slice(&bg[..n_bg]);
    picked
}

#[allow(clippy::too_many_arguments)]
fn image_pass<R: Rng + ?Sized>(
    params: &DetectorParams,
    ctx: &StepContext<'_>,
    img: &ImageRecord,
    cached: Option<&FeatureMap>,
    n_images: usize,
    rng: &mut R,
    losses: &mut StepLosses,
) -> ImagePass {
    let cfg = ctx.cfg;
    let (backbone, features) = match cached {
        Some(f) => (None, f.clone()),
        None => {
            let fwd = backbone_forward(params, img.image.to_f32(), cfg.image_size);
            let f = fwd.features().clone();
            (Some(fwd), f)
        }
    };
    let rpn = rpn_forward(params, &features);
    let gt = img.gt_boxes();
    let gt_labels = img.gt_labels();

    let a = cfg.anchors_per_location();
    let targets = assign_rpn_targets(&ctx.anchors, &gt, cfg, rng);
    losses.positive_anchors += targets.num_positive;
    let sampled = targets.labels.iter().filter(|&&l| l >= 0).count().max(1) as f64;
    let norm = 1.0 / (sampled * n_images as f64);
    let mut d_objectness = Array2::<f32>::zeros(rpn.objectness.dim());
    let mut d_deltas = Array2::<f32>::zeros(rpn.deltas.dim());
    for (i, &label) in targets.labels.iter().enumerate() {
        if label < 0 {
            continue;
        }
        let (loc, j) = (i / a, i % a);
        let (l, d) = bce_with_logit(rpn.objectness[[loc, j]] as f64, label as f64);
        losses.rpn += l * norm;
        d_objectness[[loc, j]] = (d * norm) as f32;
        if label == 1 {
            for k in 0..4 {
                let diff = rpn.deltas[[loc, 4 * j + k]] as f64 - targets.deltas[i][k];
                let (l, d) = smooth_l1(diff, SMOOTH_L1_BETA);
                losses.rpn += l * norm;
                d_deltas[[loc, 4 * j + k]] = (d * norm) as f32;
            }
        }
    }

    let (mut proposals, _) = generate_proposals(
        &ctx.anchors,
        rpn.objectness.as_slice().expect("contiguous"),
        rpn.deltas.as_slice().expect("contiguous"),
        cfg,
        cfg.rpn_post_nms_cap,
    );
    let n_props = proposals.len();
    proposals.extend_from_slice(&gt);
    let matches = match_proposals(&proposals, &gt, &gt_labels, cfg.fg_iou_threshold);
    losses.foreground_proposals += matches[..n_props].iter().filter(|m| m.is_foreground()).count();
    let mut fg: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].is_foreground()).collect();
    let mut bg: Vec<usize> = (0..matches.len()).filter(|&i| !matches[i].is_foreground()).collect();
    let picked = sample_rois(&mut fg, &mut bg, cfg, rng);

    let coder = BoxCoder::new(ROI_CODER_WEIGHTS);
    let boxes: Vec<BBox> = picked.iter().map(|&i| proposals[i]).collect();
    let mut rois = ImageRois {
        sampling: RoiSampling::new(&boxes, cfg.feature_stride() as f64, features.height, features.width, cfg.roi_pool),
        labels: Vec::with_capacity(picked.len()),
        class_ids: Vec::with_capacity(picked.len()),
        ious: Vec::with_capacity(picked.len()),
        reg_targets: Vec::with_capacity(picked.len()),
    };
    for &i in &picked {
        let m = &matches[i];
        rois.ious.push(m.iou_u);
        match (m.label_y, m.matched_gt_index) {
            (Some(y), Some(g)) => {
                rois.labels.push(ctx.class_index[&y]);
                rois.class_ids.push(Some(y));
                rois.reg_targets.push(Some(coder.encode(&proposals[i], &gt[g])));
            }
            _ => {
                rois.labels.push(ctx.background);
                rois.class_ids.push(None);
                rois.reg_targets.push(None);
            }
        }
    }
    ImagePass {
        backbone,
        features,
        rpn,
        d_objectness,
        d_deltas,
        rois,
    }
}

/// Forward and backward of one step; gradients accumulate into `grads`.
fn train_step<R: Rng + ?Sized>(
    params: &DetectorParams,
    grads: &mut DetectorParams,
    ctx: &StepContext<'_>,
    batch: &[&ImageRecord],
    cached: Option<Vec<&FeatureMap>>,
    rng: &mut R,
) -> Result<StepLosses> {
    let cfg = ctx.cfg;
    let freeze = &cfg.freeze;
    let mut losses = StepLosses::default();
    let passes: Vec<ImagePass> = batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let c = cached.as_ref().map(|v| v[i]);
            image_pass(params, ctx, img, c, batch.len(), rng, &mut losses)
        })
        .collect();

    let pooled: Vec<Array2<f32>> = passes.iter().map(|p| p.rois.sampling.forward(&p.features)).collect();
    let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
    let pooled = concatenate(Axis(0), &views).expect("same width");
    let r = pooled.nrows();
    losses.sampled_rois = r;

    let labels: Vec<usize> = passes.iter().flat_map(|p| p.rois.labels.iter().copied()).collect();
    let class_ids: Vec<Option<u32>> = passes.iter().flat_map(|p| p.rois.class_ids.iter().copied()).collect();
    let ious: Vec<f64> = passes.iter().flat_map(|p| p.rois.ious.iter().copied()).collect();
    let reg_targets: Vec<Option<[f64; 4]>> = passes.iter().flat_map(|p| p.rois.reg_targets.iter().copied()).collect();
    let fg_rows: Vec<usize> = (0..r).filter(|&i| class_ids[i].is_some()).collect();
    losses.foreground_rois = fg_rows.len();

    let trunk_trainable = !freeze.roi_feature_extractor || !freeze.backbone;
    let mut dx_total: Option<Array2<f32>> = None;
    let rf = roi_features_forward(params, pooled);
    if r > 0 {
        let pred = predictor_forward(params, rf.x.view());
        let probs = softmax_rows(&pred.cls.logits);
        let inv_r = 1.0 / r as f64;
        let mut dlogits = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            losses.cls -= probs[[i, y]].max(1e-300).ln() * inv_r;
            dlogits[[i, y]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v * inv_r);
        let mut dreg = Array2::<f32>::zeros((r, 4));
        for &i in &fg_rows {
            let t = reg_targets[i].expect("foreground has a target");
            for k in 0..4 {
                let (l, d) = smooth_l1(pred.deltas[[i, k]] as f64 - t[k], SMOOTH_L1_BETA);
                losses.reg += l * inv_r;
                dreg[[i, k]] = (d * inv_r) as f32;
            }
        }
        let mut dx = params
            .classifier
            .backward_batch(&pred.cls, &dlogits, &mut grads.classifier.prototypes, trunk_trainable)
            .unwrap_or_else(|| Array2::zeros(rf.x.dim()));
        if let Some(d) = params
            .box_regressor
            .backward(rf.x.view(), dreg.view(), &mut grads.box_regressor, trunk_trainable)
        {
            dx += &d;
        }

        if let Some(cpe) = ctx.cpe.filter(|c| c.is_enabled()) {
            losses.lambda = cpe.lambda;
            let x_fg = rf.x.select(Axis(0), &fg_rows);
            let z = params.contrastive.forward_batch(x_fg.view());
            let mut kept = Vec::new();
            let mut records = Vec::new();
            for (row, zr) in z.rows().into_iter().enumerate() {
                let zv: Vec<f64> = zr.iter().map(|&v| v as f64).collect();
                if zv.iter().map(|v| v * v).sum::<f64>().sqrt() <= NORM_EPS {
                    continue;
                }
                let i = fg_rows[row];
                records.push(ProposalRecord::new(zv, ious[i].clamp(0.0, 1.0), class_ids[i].expect("foreground"))?);
                kept.push(row);
            }
            losses.cpe_batch = records.len();
            let (l_cpe, g) = cpe_loss_with_grad(&records, &cpe)?;
            losses.cpe = l_cpe;
            let mut dz = Array2::<f32>::zeros(z.dim());
            for (k, &row) in kept.iter().enumerate() {
                for (o, v) in dz.row_mut(row).iter_mut().zip(&g[k]) {
                    *o = (cpe.lambda * v) as f32;
                }
            }
            let dx_fg = params
                .contrastive
                .proj
                .backward(x_fg.view(), dz.view(), &mut grads.contrastive.proj, trunk_trainable);
            if let Some(dx_fg) = dx_fg {
                for (k, &i) in fg_rows.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &dx_fg.row(k);
                }
            }
        }
        dx_total = trunk_trainable.then_some(dx);
    }

    let d_pooled = dx_total.and_then(|dx| roi_features_backward(params, &rf, dx, grads, !freeze.backbone));
    let mut offset = 0;
    for p in &passes {
        let n = p.rois.sampling.len();
        let mut dfeat = (!freeze.backbone).then(|| FeatureMap::zeros(p.features.channels, p.features.height, p.features.width));
        if let (Some(dp), Some(df)) = (d_pooled.as_ref(), dfeat.as_mut()) {
            let rows = dp.slice(ndarray::s![offset..offset + n, ..]).to_owned();
            p.rois.sampling.backward(&rows, df);
        }
        offset += n;
        if !freeze.rpn || !freeze.backbone {
            let d_rpn = rpn_backward(params, &p.rpn, &p.d_objectness, &p.d_deltas, grads, !freeze.backbone);
            if let (Some(df), Some(d)) = (dfeat.as_mut(), d_rpn) {
                for (a, b) in df.data.iter_mut().zip(&d.data) {
                    *a += b;
                }
            }
        }
        if let (Some(df), Some(bb)) = (dfeat, p.backbone.as_ref()) {
            backbone_backward(params, bb, df, grads);
        }
    }

    losses.total = total_finetune_loss(losses.rpn, losses.cls, losses.reg, losses.cpe, losses.lambda)?;
    Ok(losses)
}

fn learning_rate(cfg: &DetectorConfig, step: usize) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let decay = if (step as f64) >= cfg.lr_decay_at * cfg.steps as f64 {
        0.1
    } else {
        1.0
    };
    cfg.learning_rate * warm * decay
}

/// SGD with momentum and weight decay on unfrozen parameters only.
fn sgd_update(params: &mut DetectorParams, grads: &DetectorParams, velocity: &mut DetectorParams, cfg: &DetectorConfig, lr: f64) {
    let trainable = |name: &str| Component::of_param(name).is_some_and(|c| !cfg.freeze.is_frozen(c));
    let grad_list = grads.named();
    let sq: f64 = grad_list.iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t.sum_sq()).sum();
    let norm = sq.sqrt();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let (m, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    let (clip, lr) = (clip as f32, lr as f32);
    for (((name, p), (_, g)), (_, v)) in params.named_mut().into_iter().zip(grad_list).zip(velocity.named_mut()) {
        if !trainable(&name) {
            continue;
        }
        for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vv = m * *vv + gv * clip + wd * *pv;
            *pv -= lr * *vv;
        }
    }
}

fn zero_grads(grads: &mut DetectorParams) {
    for (_, t) in grads.named_mut() {
        t.fill_zero();
    }
}

fn run_loop(
    state: &mut DetectorState,
    dataset: &DetectionDataset,
    cpe: Option<CpeConfig>,
    cache: Option<&[FeatureMap]>,
    seed: u64,
) -> Result<RpnRoiStats> {
    let cfg = state.config.clone();
    let class_index: HashMap<u32, usize> = state.class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ctx = StepContext {
        cfg: &cfg,
        anchors: generate_anchors(&cfg),
        class_index,
        background: state.class_ids.len(),
        cpe,
    };
    let mut rng = step_rng(seed);
    let mut grads = state.params.zeros_like();
    let mut velocity = state.params.zeros_like();
    let mut log = Vec::with_capacity(cfg.steps);
    let (mut anchors_sum, mut fg_sum, mut images) = (0usize, 0usize, 0usize);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.images_per_step)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let batch: Vec<&ImageRecord> = picks.iter().map(|&i| &dataset.images[i]).collect();
        let cached = cache.map(|c| picks.iter().map(|&i| &c[i]).collect());
        zero_grads(&mut grads);
        let mut losses = train_step(&state.params, &mut grads, &ctx, &batch, cached, &mut rng)?;
        let lr = learning_rate(&cfg, step);
        losses.step = step;
        losses.learning_rate = lr;
        if !losses.total.is_finite() {
            return Err(FsceError::NonFiniteLoss("total"));
        }
        sgd_update(&mut state.params, &grads, &mut velocity, &cfg, lr);
        anchors_sum += losses.positive_anchors;
        fg_sum += losses.foreground_proposals;
        images += batch.len();
        log.push(losses);
    }
    let denom = images.max(1) as f64;
    Ok(RpnRoiStats {
        images,
        mean_positive_anchors: anchors_sum as f64 / denom,
        mean_foreground_proposals: fg_sum as f64 / denom,
        loss_components: log,
    })
}

fn check_image_sizes(dataset: &DetectionDataset, cfg: &DetectorConfig) -> Result<()> {
    for img in &dataset.images {
        if img.image.size() != cfg.image_size {
            return Err(FsceError::ImageSize {
                expected: cfg.image_size,
                actual: img.image.size(),
            });
        }
    }
    Ok(())
}

/// First stage: train every component on base-class data. No contrastive term.
pub fn train_base(dataset: &DetectionDataset, cfg: &DetectorConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(FsceError::EmptyDataset("base training set"));
    }
    check_image_sizes(dataset, cfg)?;
    let base_ids = dataset.registry.base_ids();
    if base_ids.is_empty() {
        return Err(FsceError::Config("registry has no base classes".into()));
    }
    for img in &dataset.images {
        if let Some(a) = img.annotations.iter().find(|a| !base_ids.contains(&a.class_id)) {
            return Err(FsceError::Config(format!(
                "base training set contains novel class `{}` in {}",
                dataset.registry.name(a.class_id),
                img.path
            )));
        }
    }
    // The contrastive head gets no gradient in this stage; keep weight decay off it too.
    let mut cfg = cfg.clone();
    cfg.freeze.contrastive_head = true;
    let mut state = DetectorState::initialize(cfg, base_ids, seed)?;
    let stats = run_loop(&mut state, dataset, None, None, seed)?;
    Ok(TrainOutcome { state, stats })
}

/// Second stage: expand the classifier to the novel classes and train on the
/// balanced set with the backbone frozen. `cpe.lambda == 0` disables the
/// contrastive term.
pub fn fine_tune(
    base: &DetectorState,
    balanced: &DetectionDataset,
    cfg: &DetectorConfig,
    cpe: &CpeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if base.stage != Stage::Base {
        return Err(FsceError::StageMismatch {
            expected: Stage::Base.to_string(),
            found: base.stage.to_string(),
        });
    }
    cfg.validate()?;
    cpe.validate()?;
    let mut cfg = cfg.clone();
    if !cpe.is_enabled() {
        cfg.freeze.contrastive_head = true;
    }
    let cfg = &cfg;
    if !cfg.freeze.backbone {
        return Err(FsceError::Config("fine-tuning requires a frozen backbone".into()));
    }
    if balanced.is_empty() {
        return Err(FsceError::EmptyDataset("balanced fine-tuning set"));
    }
    check_image_sizes(balanced, cfg)?;
    let arch = |c: &DetectorConfig| {
        (
            c.image_size,
            c.backbone_channels,
            c.anchor_sizes.clone(),
            c.anchor_ratios.clone(),
            c.roi_pool,
            c.roi_dim,
        )
    };
    if arch(cfg) != arch(&base.config) {
        return Err(FsceError::Config("fine-tuning config changes the architecture".into()));
    }
    for id in balanced.registry.base_ids() {
        if base.class_index(id).is_none() {
            return Err(FsceError::MissingClass(balanced.registry.name(id)));
        }
    }
    let novel: Vec<u32> = balanced
        .registry
        .all_ids()
        .into_iter()
        .filter(|&c| base.class_index(c).is_none())
        .collect();

    let mut params = base.params.clone();
    let mut rng = param_rng(seed);
    if cfg.contrast_dim != base.config.contrast_dim {
        // The head is untrained in the base stage, so a new width just re-draws it.
        params.contrastive = ContrastiveHead::new(cfg.roi_dim, cfg.contrast_dim, &mut rng);
    }
    if !novel.is_empty() {
        let d = cfg.roi_dim;
        let mut rows = Tensor::randn(&[novel.len(), d], 1.0, &mut rng);
        for row in rows.data.chunks_mut(d) {
            let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            row.iter_mut().for_each(|v| *v /= n);
        }
        params.classifier.insert_before_background(&rows);
    }
    let mut class_ids = base.class_ids.clone();
    class_ids.extend(&novel);
    let mut state = DetectorState {
        stage: Stage::Finetune,
        config: cfg.clone(),
        seed,
        class_ids,
        params,
    };
    let cache: Vec<FeatureMap> = balanced
        .images
        .iter()
        .map(|img| backbone_forward(&state.params, img.image.to_f32(), cfg.image_size).features().clone())
        .collect();
    let stats = run_loop(&mut state, balanced, Some(*cpe), Some(&cache), seed)?;
    Ok(TrainOutcome { state, stats })
}

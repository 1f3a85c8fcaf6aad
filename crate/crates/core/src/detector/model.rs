//! Parameters and forward/backward passes of the toy two-stage detector.
//!
//! Backbone: four 3x3 conv + ReLU blocks, the first three with stride 2, so a
//! 64 px image becomes an 8x8 map. RPN: 3x3 conv + ReLU, then per-location
//! objectness and box deltas. RoI head: RoIAlign, two fully connected ReLU
//! layers producing the RoI feature, then cosine classifier, class-agnostic
//! box regressor and the contrastive projection.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use crate::contrastive_head::{ContrastiveHead, CosineClassifier, CosineForward};
use crate::geometry::BBox;
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, ConvCache, FeatureMap, Linear, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub backbone: Vec<Conv2d>,
    pub rpn_conv: Conv2d,
    pub rpn_objectness: Linear,
    pub rpn_deltas: Linear,
    pub roi_fc1: Linear,
    pub roi_fc2: Linear,
    /// Foreground prototypes followed by one background prototype.
    pub classifier: CosineClassifier,
    pub box_regressor: Linear,
    pub contrastive: ContrastiveHead,
}

impl DetectorParams {
    pub fn init<R: Rng + ?Sized>(cfg: &DetectorConfig, num_classes: usize, rng: &mut R) -> Self {
        let ch = cfg.backbone_channels;
        let strides = [2, 2, 2, 1];
        let mut prev = 1;
        let backbone = ch
            .iter()
            .zip(strides)
            .map(|(&c, s)| {
                let conv = Conv2d::new(prev, c, s, rng);
                prev = c;
                conv
            })
            .collect();
        let c = ch[3];
        let a = cfg.anchors_per_location();
        let pooled = c * cfg.roi_pool * cfg.roi_pool;
        let mut box_regressor = Linear::new(cfg.roi_dim, 4, 0.001, rng);
        box_regressor.bias.fill_zero();
        DetectorParams {
            backbone,
            rpn_conv: Conv2d::new(c, c, 1, rng),
            rpn_objectness: Linear::new(c, a, 0.01, rng),
            rpn_deltas: Linear::new(c, 4 * a, 0.01, rng),
            roi_fc1: Linear::new(pooled, cfg.roi_dim, (2.0 / pooled as f64).sqrt(), rng),
            roi_fc2: Linear::new(cfg.roi_dim, cfg.roi_dim, (2.0 / cfg.roi_dim as f64).sqrt(), rng),
            classifier: CosineClassifier::random(num_classes + 1, cfg.roi_dim, cfg.cosine_scale, rng),
            box_regressor,
            contrastive: ContrastiveHead::new(cfg.roi_dim, cfg.contrast_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DetectorParams {
            backbone: self.backbone.iter().map(Conv2d::zeros_like).collect(),
            rpn_conv: self.rpn_conv.zeros_like(),
            rpn_objectness: self.rpn_objectness.zeros_like(),
            rpn_deltas: self.rpn_deltas.zeros_like(),
            roi_fc1: self.roi_fc1.zeros_like(),
            roi_fc2: self.roi_fc2.zeros_like(),
            classifier: CosineClassifier {
                prototypes: self.classifier.prototypes.zeros_like(),
                alpha: self.classifier.alpha,
            },
            box_regressor: self.box_regressor.zeros_like(),
            contrastive: ContrastiveHead {
                proj: self.contrastive.proj.zeros_like(),
            },
        }
    }

    /// Every parameter tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            conv.named(&format!("backbone.conv{}", i + 1), &mut out);
        }
        self.rpn_conv.named("rpn.conv", &mut out);
        self.rpn_objectness.named("rpn.objectness", &mut out);
        self.rpn_deltas.named("rpn.deltas", &mut out);
        self.roi_fc1.named("roi_feature_extractor.fc1", &mut out);
        self.roi_fc2.named("roi_feature_extractor.fc2", &mut out);
        out.push(("box_predictor.prototypes".into(), &self.classifier.prototypes));
        self.box_regressor.named("box_predictor.regressor", &mut out);
        self.contrastive.proj.named("contrastive_head.proj", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            conv.named_mut(&format!("backbone.conv{}", i + 1), &mut out);
        }
        self.rpn_conv.named_mut("rpn.conv", &mut out);
        self.rpn_objectness.named_mut("rpn.objectness", &mut out);
        self.rpn_deltas.named_mut("rpn.deltas", &mut out);
        self.roi_fc1.named_mut("roi_feature_extractor.fc1", &mut out);
        self.roi_fc2.named_mut("roi_feature_extractor.fc2", &mut out);
        out.push(("box_predictor.prototypes".into(), &mut self.classifier.prototypes));
        self.box_regressor.named_mut("box_predictor.regressor", &mut out);
        self.contrastive.proj.named_mut("contrastive_head.proj", &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub struct BackboneForward {
    /// Post-ReLU output of each block.
    pub acts: Vec<FeatureMap>,
    caches: Vec<ConvCache>,
}

impl BackboneForward {
    pub fn features(&self) -> &FeatureMap {
        self.acts.last().expect("backbone has blocks")
    }
}

pub fn backbone_forward(params: &DetectorParams, pixels: Vec<f32>, size: usize) -> BackboneForward {
    let mut x = FeatureMap {
        channels: 1,
        height: size,
        width: size,
        data: pixels,
    };
    let mut acts = Vec::with_capacity(params.backbone.len());
    let mut caches = Vec::with_capacity(params.backbone.len());
    for conv in &params.backbone {
        let (mut y, cache) = conv.forward(&x);
        relu_inplace(&mut y.data);
        caches.push(cache);
        acts.push(y.clone());
        x = y;
    }
    BackboneForward { acts, caches }
}

pub fn backbone_backward(params: &DetectorParams, fwd: &BackboneForward, dfeat: FeatureMap, grads: &mut DetectorParams) {
    let mut d = dfeat;
    for i in (0..params.backbone.len()).rev() {
        relu_backward_inplace(&mut d.data, &fwd.acts[i].data);
        let want_dx = i > 0;
        match params.backbone[i].backward(&fwd.caches[i], &d, &mut grads.backbone[i], want_dx) {
            Some(dx) => d = dx,
            None => break,
        }
    }
}

pub struct RpnForward {
    hidden: FeatureMap,
    hidden_cache: ConvCache,
    hidden_rows: Array2<f32>,
    /// `[locations, anchors]`
    pub objectness: Array2<f32>,
    /// `[locations, 4 * anchors]`
    pub deltas: Array2<f32>,
}

pub fn rpn_forward(params: &DetectorParams, feat: &FeatureMap) -> RpnForward {
    let (mut hidden, hidden_cache) = params.rpn_conv.forward(feat);
    relu_inplace(&mut hidden.data);
    let hidden_rows = hidden.view().t().as_standard_layout().into_owned();
    let objectness = params.rpn_objectness.forward(hidden_rows.view());
    let deltas = params.rpn_deltas.forward(hidden_rows.view());
    RpnForward {
        hidden,
        hidden_cache,
        hidden_rows,
        objectness,
        deltas,
    }
}

pub fn rpn_backward(
    params: &DetectorParams,
    fwd: &RpnForward,
    d_objectness: &Array2<f32>,
    d_deltas: &Array2<f32>,
    grads: &mut DetectorParams,
    want_dfeat: bool,
) -> Option<FeatureMap> {
    let h = fwd.hidden_rows.view();
    let d1 = params
        .rpn_objectness
        .backward(h, d_objectness.view(), &mut grads.rpn_objectness, true)
        .expect("dx requested");
    let d2 = params
        .rpn_deltas
        .backward(h, d_deltas.view(), &mut grads.rpn_deltas, true)
        .expect("dx requested");
    let d_rows = d1 + d2;
    let mut d_hidden = FeatureMap {
        channels: fwd.hidden.channels,
        height: fwd.hidden.height,
        width: fwd.hidden.width,
        data: d_rows.t().as_standard_layout().into_owned().into_raw_vec_and_offset().0,
    };
    relu_backward_inplace(&mut d_hidden.data, &fwd.hidden.data);
    params
        .rpn_conv
        .backward(&fwd.hidden_cache, &d_hidden, &mut grads.rpn_conv, want_dfeat)
}

/// Bilinear sample taps for RoIAlign: per RoI and bin, `(plane offset, weight)`.
pub struct RoiSampling {
    pool: usize,
    taps: Vec<Vec<Vec<(usize, f32)>>>,
}

const SAMPLES_PER_BIN: usize = 2;

impl RoiSampling {
    pub fn new(boxes: &[BBox], stride: f64, height: usize, width: usize, pool: usize) -> Self {
        let taps = boxes
            .iter()
            .map(|b| {
                let x0 = b.x1() / stride - 0.5;
                let y0 = b.y1() / stride - 0.5;
                let bw = b.width() / stride / pool as f64;
                let bh = b.height() / stride / pool as f64;
                let norm = 1.0 / (SAMPLES_PER_BIN * SAMPLES_PER_BIN) as f64;
                let mut bins = Vec::with_capacity(pool * pool);
                for py in 0..pool {
                    for px in 0..pool {
                        let mut t = Vec::with_capacity(16);
                        for sy in 0..SAMPLES_PER_BIN {
                            for sx in 0..SAMPLES_PER_BIN {
                                let y = y0 + bh * (py as f64 + (sy as f64 + 0.5) / SAMPLES_PER_BIN as f64);
                                let x = x0 + bw * (px as f64 + (sx as f64 + 0.5) / SAMPLES_PER_BIN as f64);
                                bilinear_taps(y, x, height, width, norm, &mut t);
                            }
                        }
                        bins.push(t);
                    }
                }
                bins
            })
            .collect();
        RoiSampling { pool, taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// `[rois, channels * pool * pool]`, channel-major within a row.
    pub fn forward(&self, feat: &FeatureMap) -> Array2<f32> {
        let plane = feat.height * feat.width;
        let bins = self.pool * self.pool;
        let mut out = Array2::zeros((self.taps.len(), feat.channels * bins));
        for (r, roi) in self.taps.iter().enumerate() {
            let mut row = out.row_mut(r);
            for c in 0..feat.channels {
                let base = &feat.data[c * plane..(c + 1) * plane];
                for (b, taps) in roi.iter().enumerate() {
                    row[c * bins + b] = taps.iter().map(|&(i, w)| base[i] * w).sum();
                }
            }
        }
        out
    }

    pub fn backward(&self, d_pooled: &Array2<f32>, dfeat: &mut FeatureMap) {
        let plane = dfeat.height * dfeat.width;
        let bins = self.pool * self.pool;
        for (r, roi) in self.taps.iter().enumerate() {
            let row = d_pooled.row(r);
            for c in 0..dfeat.channels {
                let base = &mut dfeat.data[c * plane..(c + 1) * plane];
                for (b, taps) in roi.iter().enumerate() {
                    let g = row[c * bins + b];
                    if g == 0.0 {
                        continue;
                    }
                    for &(i, w) in taps {
                        base[i] += g * w;
                    }
                }
            }
        }
    }
}

fn bilinear_taps(y: f64, x: f64, height: usize, width: usize, scale: f64, out: &mut Vec<(usize, f32)>) {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return;
    }
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, w) in [(y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx)] {
        if w > 0.0 {
            out.push((yy * width + xx, (w * scale) as f32));
        }
    }
}

/// RoI feature extractor activations.
pub struct RoiFeatures {
    pub pooled: Array2<f32>,
    pub hidden: Array2<f32>,
    /// Post-ReLU RoI features `[rois, D_R]`.
    pub x: Array2<f32>,
}

pub fn roi_features_forward(params: &DetectorParams, pooled: Array2<f32>) -> RoiFeatures {
    let mut hidden = params.roi_fc1.forward(pooled.view());
    relu_inplace(hidden.as_slice_mut().expect("contiguous"));
    let mut x = params.roi_fc2.forward(hidden.view());
    relu_inplace(x.as_slice_mut().expect("contiguous"));
    RoiFeatures { pooled, hidden, x }
}

/// Backward through the two fc layers. Returns `dL/dpooled` when asked.
pub fn roi_features_backward(
    params: &DetectorParams,
    fwd: &RoiFeatures,
    mut dx: Array2<f32>,
    grads: &mut DetectorParams,
    want_dpooled: bool,
) -> Option<Array2<f32>> {
    relu_backward_inplace(dx.as_slice_mut().expect("contiguous"), fwd.x.as_slice().expect("contiguous"));
    let mut dh = params
        .roi_fc2
        .backward(fwd.hidden.view(), dx.view(), &mut grads.roi_fc2, true)
        .expect("dx requested");
    relu_backward_inplace(dh.as_slice_mut().expect("contiguous"), fwd.hidden.as_slice().expect("contiguous"));
    params
        .roi_fc1
        .backward(fwd.pooled.view(), dh.view(), &mut grads.roi_fc1, want_dpooled)
}

/// Box predictor outputs for a set of RoIs.
pub struct PredictorForward {
    pub cls: CosineForward,
    /// `[rois, 4]`
    pub deltas: Array2<f32>,
}

pub fn predictor_forward(params: &DetectorParams, x: ArrayView2<'_, f32>) -> PredictorForward {
    PredictorForward {
        cls: params.classifier.forward_batch(x),
        deltas: params.box_regressor.forward(x),
    }
}

/// Row-wise softmax of `logits`.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

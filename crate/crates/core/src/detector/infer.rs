//! Inference, proposal statistics and RoI embedding extraction.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::anchors::{generate_anchors, generate_proposals, label_anchors, MIN_PROPOSAL_SIZE, ROI_CODER_WEIGHTS};
use super::config::DetectorConfig;
use super::model::{backbone_forward, predictor_forward, roi_features_forward, rpn_forward, softmax_rows, RoiSampling};
use super::{Detection, DetectorState, RpnRoiStats};
use crate::data::{DetectionDataset, GrayImage, ImageRecord};
use crate::error::{FsceError, Result};
use crate::exec;
use crate::geometry::{argsort_desc, match_proposals, nms, BBox, BoxCoder};
use crate::nn::FeatureMap;

fn features(state: &DetectorState, image: &GrayImage) -> Result<FeatureMap> {
    let size = state.config.image_size;
    if image.size() != size {
        return Err(FsceError::ImageSize {
            expected: size,
            actual: image.size(),
        });
    }
    Ok(backbone_forward(&state.params, image.to_f32(), size).features().clone())
}

fn proposals(state: &DetectorState, cfg: &DetectorConfig, feat: &FeatureMap, anchors: &[BBox]) -> Vec<BBox> {
    let rpn = rpn_forward(&state.params, feat);
    generate_proposals(
        anchors,
        rpn.objectness.as_slice().expect("contiguous"),
        rpn.deltas.as_slice().expect("contiguous"),
        cfg,
        cfg.rpn_post_nms_cap,
    )
    .0
}

/// Runs the detector on one image. Scores are the softmax over cosine logits;
/// boxes are regressed from their proposal and suppressed per class.
pub fn detect(image: &GrayImage, state: &DetectorState, score_threshold: f64, nms_threshold: f64) -> Result<Vec<Detection>> {
    let cfg = &state.config;
    let feat = features(state, image)?;
    let props = proposals(state, cfg, &feat, &generate_anchors(cfg));
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let pooled = RoiSampling::new(&props, cfg.feature_stride() as f64, feat.height, feat.width, cfg.roi_pool).forward(&feat);
    let rf = roi_features_forward(&state.params, pooled);
    let pred = predictor_forward(&state.params, rf.x.view());
    let probs = softmax_rows(&pred.cls.logits);
    let coder = BoxCoder::new(ROI_CODER_WEIGHTS);
    let size = cfg.image_size as f64;
    let decoded: Vec<Option<BBox>> = props
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let d = pred.deltas.row(r);
            coder.decode_clipped(p, [d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64], size, MIN_PROPOSAL_SIZE)
        })
        .collect();

    let mut out = Vec::new();
    for (j, &class_id) in state.class_ids.iter().enumerate() {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (r, b) in decoded.iter().enumerate() {
            let s = probs[[r, j]];
            if let Some(b) = b {
                if s >= score_threshold {
                    boxes.push(*b);
                    scores.push(s.clamp(0.0, 1.0));
                }
            }
        }
        for k in nms(&boxes, &scores, nms_threshold, usize::MAX) {
            out.push(Detection {
                bbox: boxes[k],
                class_id,
                score: scores[k],
            });
        }
    }
    let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
    let mut sorted: Vec<Detection> = argsort_desc(&scores).into_iter().map(|i| out[i]).collect();
    sorted.truncate(cfg.detections_per_image);
    Ok(sorted)
}

/// Mean positive anchors and foreground proposals per image, using the
/// proposal knobs of `cfg` and the weights of `state`.
pub fn collect_stats(state: &DetectorState, dataset: &DetectionDataset, cfg: &DetectorConfig) -> RpnRoiStats {
    if dataset.is_empty() {
        return RpnRoiStats::default();
    }
    let anchors = generate_anchors(cfg);
    let per_image = exec::map_ordered(&dataset.images, |img| {
        let Ok(feat) = features(state, &img.image) else {
            return (0, 0);
        };
        let gt = img.gt_boxes();
        let (labels, _) = label_anchors(&anchors, &gt, cfg);
        let positive = labels.iter().filter(|&&l| l == 1).count();
        let props = proposals(state, cfg, &feat, &anchors);
        let fg = match_proposals(&props, &gt, &img.gt_labels(), cfg.fg_iou_threshold)
            .iter()
            .filter(|m| m.is_foreground())
            .count();
        (positive, fg)
    });
    let n = per_image.len() as f64;
    RpnRoiStats {
        images: per_image.len(),
        mean_positive_anchors: per_image.iter().map(|p| p.0).sum::<usize>() as f64 / n,
        mean_foreground_proposals: per_image.iter().map(|p| p.1).sum::<usize>() as f64 / n,
        loss_components: Vec::new(),
    }
}

/// Contrastive embedding of one foreground proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEmbedding {
    pub class_id: u32,
    /// IoU with the matched ground truth.
    pub u: f64,
    pub z: Vec<f64>,
}

/// Embeddings of every foreground proposal of `image`.
pub fn roi_embeddings(state: &DetectorState, image: &ImageRecord) -> Result<Vec<RoiEmbedding>> {
    let cfg = &state.config;
    let feat = features(state, &image.image)?;
    let props = proposals(state, cfg, &feat, &generate_anchors(cfg));
    let matches = match_proposals(&props, &image.gt_boxes(), &image.gt_labels(), cfg.fg_iou_threshold);
    let fg: Vec<usize> = (0..props.len()).filter(|&i| matches[i].is_foreground()).collect();
    if fg.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = fg.iter().map(|&i| props[i]).collect();
    let pooled = RoiSampling::new(&boxes, cfg.feature_stride() as f64, feat.height, feat.width, cfg.roi_pool).forward(&feat);
    let rf = roi_features_forward(&state.params, pooled);
    let z = state.params.contrastive.forward_batch(rf.x.view());
    Ok(fg
        .iter()
        .zip(z.axis_iter(Axis(0)))
        .map(|(&i, row)| RoiEmbedding {
            class_id: matches[i].label_y.expect("foreground"),
            u: matches[i].iou_u,
            z: row.iter().map(|&v| v as f64).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeKind};

    fn state() -> DetectorState {
        DetectorState::initialize(DetectorConfig::default(), vec![0, 1, 2], 3).unwrap()
    }

    #[test]
    fn wrong_size_is_error() {
        let s = state();
        assert!(matches!(
            detect(&GrayImage::filled(32, 0), &s, 0.05, 0.5),
            Err(FsceError::ImageSize { expected: 64, actual: 32 })
        ));
    }

    #[test]
    fn detections_sorted_and_bounded() {
        let s = state();
        let ds = generate_synthetic(3, &ShapeKind::ALL, 64, 1).unwrap();
        for img in &ds.images {
            let dets = detect(&img.image, &s, 0.0, 0.5).unwrap();
            assert!(dets.len() <= s.config.detections_per_image);
            assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
            assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.score)));
            assert!(detect(&img.image, &s, 1.0 + 1e-9, 0.5).unwrap().is_empty());
        }
    }

    #[test]
    fn stats_are_deterministic_and_empty_is_zero() {
        let s = state();
        let ds = generate_synthetic(6, &ShapeKind::ALL, 64, 1).unwrap();
        let a = collect_stats(&s, &ds, &s.config);
        let b = collect_stats(&s, &ds, &s.config);
        assert_eq!(a, b);
        assert!(a.mean_positive_anchors > 0.0);
        let empty = collect_stats(&s, &ds.take(0), &s.config);
        assert_eq!(empty, RpnRoiStats::default());
    }

    #[test]
    fn embeddings_have_contrast_dim() {
        let s = state();
        let ds = generate_synthetic(4, &ShapeKind::ALL, 64, 1).unwrap();
        for img in &ds.images {
            for e in roi_embeddings(&s, img).unwrap() {
                assert_eq!(e.z.len(), s.config.contrast_dim);
                assert!(e.u >= s.config.fg_iou_threshold);
            }
        }
    }
}

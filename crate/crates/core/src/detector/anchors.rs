//! Anchor grid, RPN target assignment and proposal generation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::DetectorConfig;
use crate::geometry::{argsort_desc, iou, nms, BBox, BoxCoder};

/// Coder for RPN deltas relative to anchors.
pub const RPN_CODER_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
/// Coder for RoI head deltas relative to proposals.
pub const ROI_CODER_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
/// Proposals narrower than this after clipping are dropped.
pub const MIN_PROPOSAL_SIZE: f64 = 1.0;

/// Anchors in `(y, x, size, ratio)` order, so anchor `loc * A + a` lines up
/// with column `a` of row `loc` of the RPN outputs. `ratio` is height / width.
pub fn generate_anchors(cfg: &DetectorConfig) -> Vec<BBox> {
    let fs = cfg.feature_size();
    let stride = cfg.feature_stride() as f64;
    let mut out = Vec::with_capacity(fs * fs * cfg.anchors_per_location());
    for y in 0..fs {
        for x in 0..fs {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in &cfg.anchor_sizes {
                for &r in &cfg.anchor_ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h).expect("positive anchor size"));
                }
            }
        }
    }
    out
}

/// Sampled RPN training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// `1` positive, `0` negative, `-1` ignored (unsampled or in between).
    pub labels: Vec<i8>,
    /// Regression targets; meaningful only where `labels == 1`.
    pub deltas: Vec<[f64; 4]>,
    /// Positive anchors before subsampling.
    pub num_positive: usize,
}

/// Max IoU over ground truth per anchor and the index achieving it.
fn best_gt(anchors: &[BBox], gt: &[BBox]) -> (Vec<f64>, Vec<usize>, Vec<Vec<f64>>) {
    let table: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    let mut best = vec![0.0; anchors.len()];
    let mut arg = vec![0; anchors.len()];
    for (i, row) in table.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                arg[i] = g;
            }
        }
    }
    (best, arg, table)
}

/// Unsampled anchor labels: positive at IoU >= `rpn_positive_iou` or when the
/// anchor is the best match of some ground truth, negative under
/// `rpn_negative_iou`, ignored otherwise.
pub fn label_anchors(anchors: &[BBox], gt: &[BBox], cfg: &DetectorConfig) -> (Vec<i8>, Vec<usize>) {
    if gt.is_empty() {
        return (vec![0; anchors.len()], vec![0; anchors.len()]);
    }
    let (best, mut arg, table) = best_gt(anchors, gt);
    let mut labels: Vec<i8> = best
        .iter()
        .map(|&v| {
            if v >= cfg.rpn_positive_iou {
                1
            } else if v < cfg.rpn_negative_iou {
                0
            } else {
                -1
            }
        })
        .collect();
    for g in 0..gt.len() {
        let top = table.iter().map(|r| r[g]).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (i, row) in table.iter().enumerate() {
            if row[g] == top && labels[i] != 1 {
                labels[i] = 1;
                arg[i] = g;
            }
        }
    }
    (labels, arg)
}

pub fn assign_rpn_targets<R: Rng + ?Sized>(
    anchors: &[BBox],
    gt: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RpnTargets {
    let (mut labels, arg) = label_anchors(anchors, gt, cfg);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let num_positive = pos.len();
    let max_pos = (cfg.rpn_batch_size as f64 * cfg.rpn_positive_fraction) as usize;
    pos.shuffle(rng);
    for &i in pos.iter().skip(max_pos) {
        labels[i] = -1;
    }
    let kept_pos = pos.len().min(max_pos);
    let max_neg = cfg.rpn_batch_size.saturating_sub(kept_pos);
    neg.shuffle(rng);
    for &i in neg.iter().skip(max_neg) {
        labels[i] = -1;
    }
    let coder = BoxCoder::new(RPN_CODER_WEIGHTS);
    let deltas = anchors
        .iter()
        .zip(&labels)
        .zip(&arg)
        .map(|((a, &l), &g)| if l == 1 { coder.encode(a, &gt[g]) } else { [0.0; 4] })
        .collect();
    RpnTargets {
        labels,
        deltas,
        num_positive,
    }
}

/// Decodes RPN outputs into at most `post_nms_cap` scored proposals.
pub fn generate_proposals(
    anchors: &[BBox],
    objectness: &[f32],
    deltas: &[f32],
    cfg: &DetectorConfig,
    post_nms_cap: usize,
) -> (Vec<BBox>, Vec<f64>) {
    let coder = BoxCoder::new(RPN_CODER_WEIGHTS);
    let scores: Vec<f64> = objectness.iter().map(|&v| v as f64).collect();
    let order = argsort_desc(&scores);
    let size = cfg.image_size as f64;
    let mut boxes = Vec::with_capacity(cfg.rpn_pre_nms_topk);
    let mut kept_scores = Vec::with_capacity(cfg.rpn_pre_nms_topk);
    for &i in order.iter().take(cfg.rpn_pre_nms_topk) {
        let d = [
            deltas[4 * i] as f64,
            deltas[4 * i + 1] as f64,
            deltas[4 * i + 2] as f64,
            deltas[4 * i + 3] as f64,
        ];
        if let Some(b) = coder.decode_clipped(&anchors[i], d, size, MIN_PROPOSAL_SIZE) {
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
    }
    let keep = nms(&boxes, &kept_scores, cfg.rpn_nms_threshold, post_nms_cap);
    (
        keep.iter().map(|&k| boxes[k]).collect(),
        keep.iter().map(|&k| kept_scores[k]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_grid_layout() {
        let cfg = DetectorConfig::default();
        let a = generate_anchors(&cfg);
        assert_eq!(a.len(), 64 * 9);
        // ratio 1, size 16 at the first location
        let b = a[1];
        assert!((b.center().0 - 4.0).abs() < 1e-12 && (b.center().1 - 4.0).abs() < 1e-12);
        let sq = a[4];
        assert!((sq.width() - 32.0).abs() < 1e-12 && (sq.height() - 32.0).abs() < 1e-12);
        // second location is one stride to the right
        assert!((a[9].center().0 - 12.0).abs() < 1e-12);
        for anchor in &a {
            let area = anchor.area().sqrt();
            assert!(cfg.anchor_sizes.iter().any(|s| (s - area).abs() < 1e-9));
        }
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(&cfg);
        let gt = vec![
            BBox::new(1.0, 1.0, 13.0, 12.0).unwrap(),
            BBox::new(20.0, 30.0, 60.0, 50.0).unwrap(),
        ];
        let (labels, arg) = label_anchors(&anchors, &gt, &cfg);
        for g in 0..gt.len() {
            assert!((0..anchors.len()).any(|i| labels[i] == 1 && arg[i] == g));
        }
    }

    #[test]
    fn sampling_respects_batch_and_fraction() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(&cfg);
        let gt = vec![BBox::new(8.0, 8.0, 56.0, 56.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = assign_rpn_targets(&anchors, &gt, &cfg, &mut rng);
        let pos = t.labels.iter().filter(|&&l| l == 1).count();
        let neg = t.labels.iter().filter(|&&l| l == 0).count();
        assert!(pos <= 32);
        assert_eq!(pos + neg, cfg.rpn_batch_size);
        assert!(t.num_positive >= pos);
    }

    #[test]
    fn no_gt_means_all_negative_candidates() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = assign_rpn_targets(&anchors, &[], &cfg, &mut rng);
        assert_eq!(t.num_positive, 0);
        assert_eq!(t.labels.iter().filter(|&&l| l == 0).count(), cfg.rpn_batch_size);
    }

    #[test]
    fn proposals_respect_cap_and_nms() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(&cfg);
        let n = anchors.len();
        let obj: Vec<f32> = (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let del = vec![0.0f32; 4 * n];
        for cap in [1, 10, 64, 1000] {
            let (boxes, scores) = generate_proposals(&anchors, &obj, &del, &cfg, cap);
            assert!(boxes.len() <= cap);
            assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            for i in 0..boxes.len() {
                for j in 0..i {
                    assert!(iou(&boxes[i], &boxes[j]) <= cfg.rpn_nms_threshold);
                }
            }
        }
    }
}

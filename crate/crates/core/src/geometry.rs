//! Axis-aligned boxes, IoU, greedy NMS and proposal-to-ground-truth matching.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in continuous pixel
//! coordinates. A pixel `(px, py)` covers `[px, px + 1) x [py, py + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{FsceError, Result};

/// Axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(FsceError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Builds a box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Grows (positive `margin`) or shrinks the box on every side.
    pub fn expand(&self, margin: f64) -> Result<Self> {
        BBox::new(
            self.x1 - margin,
            self.y1 - margin,
            self.x2 + margin,
            self.y2 + margin,
        )
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` if the clipped box
    /// is narrower than `min_size` on either axis.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Option<Self> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        if x2 - x1 < min_size || y2 - y1 < min_size {
            return None;
        }
        BBox::new(x1, y1, x2, y2).ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = FsceError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub(crate) fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// Keeps boxes in descending score order, dropping any box whose IoU with an
/// already kept box exceeds `iou_threshold`. Returns at most `max_keep`
/// indices, highest score first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(
        boxes.len(),
        scores.len(),
        "nms: boxes and scores must have the same length"
    );
    let mut keep: Vec<usize> = Vec::new();
    if max_keep == 0 {
        return keep;
    }
    let mut suppressed = vec![false; boxes.len()];
    for i in argsort_desc(scores) {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() == max_keep {
            break;
        }
        for (j, flag) in suppressed.iter_mut().enumerate() {
            if !*flag && j != i && iou(&boxes[i], &boxes[j]) > iou_threshold {
                *flag = true;
            }
        }
    }
    keep
}

/// Outcome of matching one proposal against the ground truth of its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Matched ground-truth index; `None` for background.
    pub matched_gt_index: Option<usize>,
    /// Maximum IoU over all ground-truth boxes.
    pub iou_u: f64,
    /// Ground-truth class; `None` is the background sentinel.
    pub label_y: Option<u32>,
}

impl MatchResult {
    pub fn is_foreground(&self) -> bool {
        self.label_y.is_some()
    }
}

/// Assigns each proposal to its max-IoU ground truth. Ties go to the lowest
/// ground-truth index. Proposals under `fg_iou_threshold` are background but
/// still report their max IoU.
pub fn match_proposals(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[u32],
    fg_iou_threshold: f64,
) -> Vec<MatchResult> {
    assert_eq!(gt_boxes.len(), gt_labels.len());
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gt_boxes.iter().enumerate() {
                let v = iou(p, gt);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, u)) if u >= fg_iou_threshold => MatchResult {
                    matched_gt_index: Some(g),
                    iou_u: u,
                    label_y: Some(gt_labels[g]),
                },
                Some((_, u)) => MatchResult {
                    matched_gt_index: None,
                    iou_u: u,
                    label_y: None,
                },
                None => MatchResult {
                    matched_gt_index: None,
                    iou_u: 0.0,
                    label_y: None,
                },
            }
        })
        .collect()
}

/// `(dx, dy, dw, dh)` box delta parameterization with per-coordinate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper clamp on `dw`/`dh` before exponentiation.
    pub scale_clamp: f64,
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        BoxCoder {
            weights,
            scale_clamp: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / reference.width(),
            wy * (ty - ry) / reference.height(),
            ww * (target.width() / reference.width()).ln(),
            wh * (target.height() / reference.height()).ln(),
        ]
    }

    /// Applies deltas; the raw corners may be degenerate before clipping.
    pub fn decode(&self, reference: &BBox, deltas: [f64; 4]) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.scale_clamp);
        let dh = (deltas[3] / wh).min(self.scale_clamp);
        let cx = rx + dx * reference.width();
        let cy = ry + dy * reference.height();
        let w = reference.width() * dw.exp();
        let h = reference.height() * dh.exp();
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }

    /// Decodes and clips to the image; `None` if the result is too small.
    pub fn decode_clipped(
        &self,
        reference: &BBox,
        deltas: [f64; 4],
        image_size: f64,
        min_size: f64,
    ) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.decode(reference, deltas);
        let [x1, y1, x2, y2] = [
            x1.clamp(0.0, image_size),
            y1.clamp(0.0, image_size),
            x2.clamp(0.0, image_size),
            y2.clamp(0.0, image_size),
        ];
        if x2 - x1 < min_size || y2 - y1 < min_size {
            return None;
        }
        BBox::new(x1, y1, x2, y2).ok()
    }
}

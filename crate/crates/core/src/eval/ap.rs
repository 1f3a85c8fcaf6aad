//! Per-class average precision with greedy score-ordered matching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::detector::Detection;
use crate::error::{FsceError, Result};
use crate::geometry::iou;

/// How the precision-recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    Voc11,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::AllPoint => "all-point",
            Interpolation::Voc11 => "voc11",
        })
    }
}

impl FromStr for Interpolation {
    type Err = FsceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-point" => Ok(Interpolation::AllPoint),
            "voc11" => Ok(Interpolation::Voc11),
            other => Err(FsceError::Config(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Score-ordered TP flags of one class plus its ground-truth count.
pub fn match_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    class_id: u32,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().enumerate().filter(|(_, d)| d.class_id == class_id).map(move |(k, d)| (img, k, d)))
        .collect();
    // stable: equal scores keep image order, then detection order
    dets.sort_by(|a, b| b.2.score.total_cmp(&a.2.score));
    let gts: Vec<Vec<&Annotation>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).collect())
        .collect();
    let npos = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp = dets
        .iter()
        .map(|&(img, _, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts[img].iter().enumerate() {
                if used[img][g] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[img][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, npos)
}

/// AP from score-ordered TP flags. `None` when there is no ground truth.
pub fn ap_from_flags(tp: &[bool], npos: usize, interp: Interpolation) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / npos as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // envelope: best precision at this recall or beyond
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let ap = match interp {
        Interpolation::AllPoint => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (r, p) in recall.iter().zip(&env) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::Voc11 => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// AP of every class in `classes` at one IoU threshold; classes without
/// ground truth map to `None`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    classes: &[u32],
    iou_threshold: f64,
    interp: Interpolation,
) -> Result<BTreeMap<u32, Option<f64>>> {
    if detections.len() != ground_truth.len() {
        return Err(FsceError::DimensionMismatch {
            context: "detections vs ground-truth images",
            expected: ground_truth.len(),
            actual: detections.len(),
        });
    }
    Ok(classes
        .iter()
        .map(|&c| {
            let (tp, npos) = match_class(detections, ground_truth, c, iou_threshold);
            (c, ap_from_flags(&tp, npos, interp))
        })
        .collect())
}

//! Detection metrics and embedding diagnostics.

mod ap;
mod embedding;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, DetectionDataset, Partition};
use crate::detector::{detect, Detection, DetectorState};
use crate::error::{FsceError, Result};
use crate::exec;

pub use ap::{ap_from_flags, average_precision, match_class, Interpolation};
pub use embedding::{
    cluster_statistics, embeddings_to_csv, export_embeddings, read_embeddings_csv, write_embeddings_csv, ClusterStats,
    EmbeddingReportRow,
};

/// Score floor for detections entering AP.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const EVAL_NMS_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub partition: Partition,
    pub instances: usize,
    /// One entry per report threshold; `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    pub per_class: BTreeMap<u32, ClassAp>,
    pub nap50: Option<f64>,
    pub nap75: Option<f64>,
    /// Novel AP averaged over 0.50:0.05:0.95; needs all ten thresholds.
    pub nap: Option<f64>,
    pub bap50: Option<f64>,
    pub images: usize,
    pub instances: usize,
}

fn threshold_index(thresholds: &[f64], t: f64) -> Option<usize> {
    thresholds.iter().position(|&x| (x - t).abs() < 1e-9)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Builds the report from per-image detections.
    pub fn from_detections(
        dataset: &DetectionDataset,
        detections: &[Vec<Detection>],
        thresholds: &[f64],
        interp: Interpolation,
    ) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(FsceError::Config("no IoU thresholds".into()));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(FsceError::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        let gts: Vec<Vec<Annotation>> = dataset.images.iter().map(|i| i.annotations.clone()).collect();
        let classes = dataset.registry.all_ids();
        let counts = dataset.instance_counts();
        let mut per_class: BTreeMap<u32, ClassAp> = classes
            .iter()
            .map(|&c| {
                let info = dataset.registry.get(c).expect("registered");
                (
                    c,
                    ClassAp {
                        name: info.shape.to_string(),
                        partition: info.partition,
                        instances: counts[&c],
                        ap: Vec::with_capacity(thresholds.len()),
                    },
                )
            })
            .collect();
        for &t in thresholds {
            let aps = average_precision(detections, &gts, &classes, t, interp)?;
            for (c, ap) in aps {
                per_class.get_mut(&c).expect("registered").ap.push(ap);
            }
        }
        let collect = |part: Partition, idx: usize| -> Vec<f64> {
            per_class
                .values()
                .filter(|c| c.partition == part)
                .filter_map(|c| c.ap[idx])
                .collect()
        };
        let at = |part: Partition, t: f64| threshold_index(thresholds, t).and_then(|i| mean(&collect(part, i)));
        let coco: Option<Vec<usize>> = coco_thresholds().iter().map(|&t| threshold_index(thresholds, t)).collect();
        let nap = coco.and_then(|idx| {
            let per: Vec<f64> = per_class
                .values()
                .filter(|c| c.partition == Partition::Novel)
                .filter_map(|c| idx.iter().map(|&i| c.ap[i]).collect::<Option<Vec<f64>>>())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            mean(&per)
        });
        Ok(EvalReport {
            thresholds: thresholds.to_vec(),
            interpolation: interp,
            nap50: at(Partition::Novel, 0.5),
            nap75: at(Partition::Novel, 0.75),
            nap,
            bap50: at(Partition::Base, 0.5),
            per_class,
            images: dataset.len(),
            instances: counts.values().sum(),
        })
    }

    /// Flat `key value` lines; absent values are omitted.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} {v}").expect("string write");
        kv("images", self.images.to_string());
        kv("instances", self.instances.to_string());
        kv("interpolation", self.interpolation.to_string());
        for (k, v) in [("nAP50", self.nap50), ("nAP75", self.nap75), ("nAP", self.nap), ("bAP50", self.bap50)] {
            if let Some(v) = v {
                kv(k, format!("{v:.6}"));
            }
        }
        for c in self.per_class.values() {
            for (t, ap) in self.thresholds.iter().zip(&c.ap) {
                if let Some(ap) = ap {
                    kv(&format!("AP{:.0}.{}", t * 100.0, c.name), format!("{ap:.6}"));
                }
            }
        }
        out
    }
}

/// Runs the detector on every image and scores the result.
pub fn evaluate(
    state: &DetectorState,
    dataset: &DetectionDataset,
    thresholds: &[f64],
    interp: Interpolation,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(FsceError::EmptyDataset("evaluation set"));
    }
    for (&c, &n) in &dataset.instance_counts() {
        if n > 0 && state.class_index(c).is_none() {
            return Err(FsceError::MissingClass(format!(
                "{} (checkpoint stage `{}` has no prototype for it)",
                dataset.registry.name(c),
                state.stage
            )));
        }
    }
    let detections = exec::map_ordered(&dataset.images, |img| {
        detect(&img.image, state, EVAL_SCORE_THRESHOLD, EVAL_NMS_THRESHOLD)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::from_detections(dataset, &detections, thresholds, interp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeKind};
    use crate::detector::DetectorConfig;

    fn dataset() -> DetectionDataset {
        let ds = generate_synthetic(6, &ShapeKind::ALL, 64, 2).unwrap();
        let reg = ds.registry.clone().with_novel(&[3, 4]).unwrap();
        ds.with_registry(reg).unwrap()
    }

    fn oracle_detections(ds: &DetectionDataset) -> Vec<Vec<Detection>> {
        ds.images
            .iter()
            .map(|i| {
                i.annotations
                    .iter()
                    .map(|a| Detection {
                        bbox: a.bbox,
                        class_id: a.class_id,
                        score: 0.9,
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn perfect_detections_score_one() {
        let ds = dataset();
        let r = EvalReport::from_detections(&ds, &oracle_detections(&ds), &coco_thresholds(), Interpolation::AllPoint)
            .unwrap();
        assert_eq!(r.nap50, Some(1.0));
        assert_eq!(r.nap, Some(1.0));
        assert_eq!(r.bap50, Some(1.0));
    }

    #[test]
    fn aggregates_are_means_and_thresholds_control_fields() {
        let ds = dataset();
        let mut dets = oracle_detections(&ds);
        for d in dets.iter_mut().step_by(2) {
            d.clear();
        }
        let r = EvalReport::from_detections(&ds, &dets, &[0.5], Interpolation::AllPoint).unwrap();
        assert!(r.nap75.is_none() && r.nap.is_none());
        let novel: Vec<f64> = r
            .per_class
            .values()
            .filter(|c| c.partition == Partition::Novel)
            .filter_map(|c| c.ap[0])
            .collect();
        assert!((r.nap50.unwrap() - novel.iter().sum::<f64>() / novel.len() as f64).abs() < 1e-9);
        let text = r.to_key_value();
        assert!(text.contains("nAP50 ") && !text.contains("nAP75"));
    }

    #[test]
    fn empty_and_missing_class_are_errors() {
        let ds = dataset();
        let state = DetectorState::initialize(DetectorConfig::default(), ds.registry.base_ids(), 0).unwrap();
        assert!(matches!(
            evaluate(&state, &ds.take(0), &[0.5], Interpolation::AllPoint),
            Err(FsceError::EmptyDataset(_))
        ));
        assert!(matches!(
            evaluate(&state, &ds, &[0.5], Interpolation::AllPoint),
            Err(FsceError::MissingClass(_))
        ));
        let r = evaluate(&state, &ds.base_only(), &[0.5], Interpolation::AllPoint).unwrap();
        let again = evaluate(&state, &ds.base_only(), &[0.5], Interpolation::AllPoint).unwrap();
        assert_eq!(r, again);
    }
}

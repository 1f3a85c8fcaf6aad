//! Toy two-stage detector: base training, few-shot fine-tuning, inference.

pub mod anchors;
mod checkpoint;
pub mod config;
mod infer;
pub mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{FsceError, Result};
use crate::geometry::BBox;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{Component, DetectorConfig, FreezeFlags, Stage};
pub use infer::{collect_stats, detect, roi_embeddings, RoiEmbedding};
pub use model::DetectorParams;
pub use train::{fine_tune, train_base, StepLosses, TrainOutcome};

/// Trained detector together with everything needed to reload it.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub stage: Stage,
    pub config: DetectorConfig,
    pub seed: u64,
    /// Dataset class id of each foreground classifier row, in row order.
    pub class_ids: Vec<u32>,
    pub params: DetectorParams,
}

impl DetectorState {
    /// Fresh, untrained state for the given foreground classes.
    pub fn initialize(config: DetectorConfig, class_ids: Vec<u32>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_ids.is_empty() {
            return Err(FsceError::EmptyDataset("class list"));
        }
        let mut rng = train::param_rng(seed);
        let params = DetectorParams::init(&config, class_ids.len(), &mut rng);
        Ok(DetectorState {
            stage: Stage::Base,
            config,
            seed,
            class_ids,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Classifier row of a dataset class id.
    pub fn class_index(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Every parameter of `component`, flattened in checkpoint order.
    pub fn component_values(&self, component: Component) -> Vec<f32> {
        self.params
            .named()
            .into_iter()
            .filter(|(n, _)| Component::of_param(n) == Some(component))
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    /// In `[0, 1]`.
    pub score: f64,
}

/// Proposal statistics averaged over a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RpnRoiStats {
    pub images: usize,
    /// Anchors labelled positive before subsampling.
    pub mean_positive_anchors: f64,
    /// Post-NMS proposals with IoU at or above the foreground threshold.
    pub mean_foreground_proposals: f64,
    pub loss_components: Vec<StepLosses>,
}

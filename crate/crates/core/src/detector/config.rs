use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive_head::DEFAULT_ALPHA;
use crate::error::{FsceError, Result};

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    Rpn,
    RoiFeatureExtractor,
    BoxPredictor,
    ContrastiveHead,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Backbone,
        Component::Rpn,
        Component::RoiFeatureExtractor,
        Component::BoxPredictor,
        Component::ContrastiveHead,
    ];

    /// Parameter-name prefix used in checkpoints.
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Rpn => "rpn",
            Component::RoiFeatureExtractor => "roi_feature_extractor",
            Component::BoxPredictor => "box_predictor",
            Component::ContrastiveHead => "contrastive_head",
        }
    }

    pub fn of_param(name: &str) -> Option<Component> {
        let head = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub backbone: bool,
    pub rpn: bool,
    pub roi_feature_extractor: bool,
    pub box_predictor: bool,
    pub contrastive_head: bool,
}

impl FreezeFlags {
    pub fn is_frozen(&self, c: Component) -> bool {
        match c {
            Component::Backbone => self.backbone,
            Component::Rpn => self.rpn,
            Component::RoiFeatureExtractor => self.roi_feature_extractor,
            Component::BoxPredictor => self.box_predictor,
            Component::ContrastiveHead => self.contrastive_head,
        }
    }

    pub fn set(&mut self, c: Component, frozen: bool) {
        match c {
            Component::Backbone => self.backbone = frozen,
            Component::Rpn => self.rpn = frozen,
            Component::RoiFeatureExtractor => self.roi_feature_extractor = frozen,
            Component::BoxPredictor => self.box_predictor = frozen,
            Component::ContrastiveHead => self.contrastive_head = frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = FsceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "finetune" => Ok(Stage::Finetune),
            other => Err(FsceError::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Architecture and training knobs of the toy detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Output channels of the four backbone blocks.
    pub backbone_channels: [usize; 4],
    pub anchor_sizes: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_topk: usize,
    pub rpn_nms_threshold: f64,
    /// Maximum proposals kept after NMS.
    pub rpn_post_nms_cap: usize,
    pub rpn_batch_size: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    /// RoIs sampled per image for the box head.
    pub roi_batch_size: usize,
    pub roi_fg_fraction: f64,
    pub fg_iou_threshold: f64,
    /// RoIAlign output is `roi_pool x roi_pool` per channel.
    pub roi_pool: usize,
    /// `D_R`
    pub roi_dim: usize,
    /// `D_C`
    pub contrast_dim: usize,
    pub cosine_scale: f64,
    pub freeze: FreezeFlags,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Fraction of `steps` after which the learning rate drops tenfold.
    pub lr_decay_at: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub images_per_step: usize,
    pub detections_per_image: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            backbone_channels: [16, 32, 32, 32],
            anchor_sizes: vec![16.0, 32.0, 48.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_topk: 300,
            rpn_nms_threshold: 0.7,
            rpn_post_nms_cap: 64,
            rpn_batch_size: 64,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            roi_batch_size: 32,
            roi_fg_fraction: 0.5,
            fg_iou_threshold: 0.5,
            roi_pool: 4,
            roi_dim: 256,
            contrast_dim: 128,
            cosine_scale: DEFAULT_ALPHA,
            freeze: FreezeFlags::default(),
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 50,
            lr_decay_at: 0.8,
            grad_clip: 10.0,
            steps: 2000,
            images_per_step: 4,
            detections_per_image: 50,
        }
    }
}

impl DetectorConfig {
    pub fn feature_stride(&self) -> usize {
        8
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.feature_stride()
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FsceError::Config(m));
        if self.image_size == 0 || self.image_size % self.feature_stride() != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                self.feature_stride()
            ));
        }
        if self.rpn_post_nms_cap == 0 {
            return bad("rpn_post_nms_cap must be > 0".into());
        }
        if self.roi_batch_size == 0 {
            return bad("roi_batch_size must be > 0".into());
        }
        if !(self.roi_fg_fraction > 0.0 && self.roi_fg_fraction < 1.0) {
            return bad(format!("roi_fg_fraction must be in (0, 1), got {}", self.roi_fg_fraction));
        }
        if !(self.fg_iou_threshold > 0.0 && self.fg_iou_threshold < 1.0) {
            return bad(format!("fg_iou_threshold must be in (0, 1), got {}", self.fg_iou_threshold));
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor sizes and ratios must be non-empty".into());
        }
        if self.backbone_channels.contains(&0) || self.roi_dim == 0 || self.contrast_dim == 0 || self.roi_pool == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.cosine_scale > 0.0) {
            return bad("cosine_scale must be > 0".into());
        }
        if !(self.learning_rate > 0.0) || self.images_per_step == 0 {
            return bad("learning_rate and images_per_step must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction) {
            return bad("rpn_positive_fraction must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Fine-tuning knobs of the strong baseline: only the backbone stays
    /// frozen, the post-NMS proposal cap doubles and the RoI batch halves.
    pub fn strong_baseline_finetune(&self, steps: usize) -> DetectorConfig {
        DetectorConfig {
            rpn_post_nms_cap: self.rpn_post_nms_cap * 2,
            roi_batch_size: (self.roi_batch_size / 2).max(1),
            freeze: FreezeFlags {
                backbone: true,
                ..FreezeFlags::default()
            },
            steps,
            ..self.clone()
        }
    }

    /// Fine-tuning with everything but the box predictors frozen and the
    /// base-stage proposal knobs.
    pub fn frozen_finetune(&self, steps: usize) -> DetectorConfig {
        DetectorConfig {
            freeze: FreezeFlags {
                backbone: true,
                rpn: true,
                roi_feature_extractor: true,
                box_predictor: false,
                contrastive_head: true,
            },
            steps,
            ..self.clone()
        }
    }
}

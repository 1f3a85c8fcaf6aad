//! Few-shot object detection with contrastive proposal encoding, at desk scale.

pub mod ablation;
pub mod contrastive_head;
pub mod cpe;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod nn;

pub use error::{FsceError, Result};

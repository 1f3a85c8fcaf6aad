//! Detection datasets, the synthetic shape generator and few-shot splits.

mod io;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FsceError, Result};
use crate::geometry::BBox;

pub use io::{load_dataset, save_dataset, ANNOTATION_FILE, CLASSES_FILE, IMAGE_DIR};
pub use split::{build_kshot_split, KShotSplit, KSHOT_MENU};
pub use synth::{generate_synthetic, render_shape, ShapeMask, BACKGROUND_MAX, FOREGROUND_MIN};

/// Square 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    size: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(FsceError::DimensionMismatch {
                context: "image pixels",
                expected: size * size,
                actual: pixels.len(),
            });
        }
        Ok(GrayImage { size, pixels })
    }

    pub fn filled(size: usize, value: u8) -> Self {
        GrayImage {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.size + x] = v;
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Relative path of the raster inside a dataset directory.
    pub path: String,
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn gt_labels(&self) -> Vec<u32> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }
}

/// Drawable shape families; each synthetic class uses one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Stripes,
    Diamond,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Stripes,
        ShapeKind::Diamond,
        ShapeKind::Frame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Stripes => "stripes",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Frame => "frame",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = FsceError;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FsceError::Config(format!("unknown shape class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Base,
    Novel,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Base => "base",
            Partition::Novel => "novel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub shape: ShapeKind,
    pub partition: Partition,
}

/// Class ids `0..n`, each bound to one shape and marked base or novel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassInfo>,
}

impl ClassRegistry {
    /// All classes start as base; ids follow the order of `shapes`.
    pub fn new(shapes: &[ShapeKind]) -> Result<Self> {
        let mut seen = shapes.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != shapes.len() {
            return Err(FsceError::Config("duplicate shape in class list".into()));
        }
        Ok(ClassRegistry {
            classes: shapes
                .iter()
                .enumerate()
                .map(|(i, &shape)| ClassInfo {
                    id: i as u32,
                    shape,
                    partition: Partition::Base,
                })
                .collect(),
        })
    }

    pub(crate) fn from_infos(classes: Vec<ClassInfo>) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            if c.id != i as u32 {
                return Err(FsceError::Config("class ids must be 0..n in order".into()));
            }
        }
        Ok(ClassRegistry { classes })
    }

    /// Marks exactly `novel` as novel; everything else becomes base.
    pub fn with_novel(mut self, novel: &[u32]) -> Result<Self> {
        for &id in novel {
            if id as usize >= self.classes.len() {
                return Err(FsceError::Config(format!("novel class id {id} not registered")));
            }
        }
        for c in &mut self.classes {
            c.partition = if novel.contains(&c.id) {
                Partition::Novel
            } else {
                Partition::Base
            };
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn get(&self, id: u32) -> Option<&ClassInfo> {
        self.classes.get(id as usize)
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn name(&self, id: u32) -> String {
        self.get(id).map_or_else(|| format!("class{id}"), |c| c.shape.name().to_string())
    }

    pub fn id_by_name(&self, name: &str) -> Result<u32> {
        self.classes
            .iter()
            .find(|c| c.shape.name() == name)
            .map(|c| c.id)
            .ok_or_else(|| FsceError::Config(format!("class `{name}` not in registry")))
    }

    pub fn ids(&self, partition: Partition) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.partition == partition)
            .map(|c| c.id)
            .collect()
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.ids(Partition::Base)
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.ids(Partition::Novel)
    }

    pub fn all_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub images: Vec<ImageRecord>,
    pub registry: ClassRegistry,
}

impl DetectionDataset {
    pub fn new(images: Vec<ImageRecord>, registry: ClassRegistry) -> Result<Self> {
        for img in &images {
            for a in &img.annotations {
                if !registry.contains(a.class_id) {
                    return Err(FsceError::Config(format!(
                        "annotation class {} not in registry ({})",
                        a.class_id, img.path
                    )));
                }
            }
        }
        Ok(DetectionDataset { images, registry })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|r| r.image.size())
    }

    /// Instance count per registered class (zero-count classes included).
    pub fn instance_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.registry.all_ids().into_iter().map(|c| (c, 0)).collect();
        for img in &self.images {
            for a in &img.annotations {
                *counts.entry(a.class_id).or_default() += 1;
            }
        }
        counts
    }

    /// Keeps only annotations of `classes`; images left without any are dropped.
    pub fn restrict_to(&self, classes: &[u32]) -> DetectionDataset {
        let images = self
            .images
            .iter()
            .filter_map(|img| {
                let annotations: Vec<Annotation> = img
                    .annotations
                    .iter()
                    .filter(|a| classes.contains(&a.class_id))
                    .copied()
                    .collect();
                (!annotations.is_empty()).then(|| ImageRecord {
                    path: img.path.clone(),
                    image: img.image.clone(),
                    annotations,
                })
            })
            .collect();
        DetectionDataset {
            images,
            registry: self.registry.clone(),
        }
    }

    /// Base-class-only view used for the first training stage.
    pub fn base_only(&self) -> DetectionDataset {
        self.restrict_to(&self.registry.base_ids())
    }

    pub fn with_registry(mut self, registry: ClassRegistry) -> Result<Self> {
        if registry.len() != self.registry.len() {
            return Err(FsceError::Config("registry size mismatch".into()));
        }
        self.registry = registry;
        Ok(self)
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> DetectionDataset {
        DetectionDataset {
            images: self.images.iter().take(n).cloned().collect(),
            registry: self.registry.clone(),
        }
    }
}

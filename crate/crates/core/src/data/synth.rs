use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, ClassRegistry, DetectionDataset, GrayImage, ImageRecord, ShapeKind};
use crate::error::{FsceError, Result};
use crate::exec;
use crate::geometry::{iou, BBox};

/// Background noise never exceeds this intensity.
pub const BACKGROUND_MAX: u8 = 40;
/// Shapes are always drawn at least this bright.
pub const FOREGROUND_MIN: u8 = 140;

const MIN_SIDE: usize = 12;
const MAX_SIDE: usize = 48;
const MAX_PAIR_IOU: f64 = 0.3;
const PLACEMENT_TRIES: usize = 50;

/// Binary mask of a shape inside its `width x height` cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMask {
    pub width: usize,
    pub height: usize,
    pub on: Vec<bool>,
}

impl ShapeMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.on[y * self.width + x]
    }

    /// Tight extent `(x0, y0, x1, y1)` of set pixels, exclusive upper corner.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    ext = Some(match ext {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        ext
    }
}

/// Rasterizes `kind` into a `width x height` cell by testing pixel centers.
pub fn render_shape(kind: ShapeKind, width: usize, height: usize) -> ShapeMask {
    let (w, h) = (width as f64, height as f64);
    let thick_x = (w / 3.0).round().max(2.0);
    let thick_y = (h / 3.0).round().max(2.0);
    let border = (w.min(h) / 6.0).round().max(2.0);
    let period = (height / 6).max(2);
    let mut on = vec![false; width * height];
    for py in 0..height {
        for px in 0..width {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            // normalized offsets from the cell center, in [-1, 1]
            let nx = (x - w / 2.0) / (w / 2.0);
            let ny = (y - h / 2.0) / (h / 2.0);
            let r2 = nx * nx + ny * ny;
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => r2 <= 1.0,
                ShapeKind::Ring => r2 <= 1.0 && r2 >= 0.55 * 0.55,
                ShapeKind::Diamond => nx.abs() + ny.abs() <= 1.0,
                ShapeKind::Triangle => {
                    // apex at top-center, base along the bottom edge
                    let t = y / h;
                    (x - w / 2.0).abs() <= 0.5 * w * t
                }
                ShapeKind::Cross => {
                    (x - w / 2.0).abs() <= thick_x / 2.0 || (y - h / 2.0).abs() <= thick_y / 2.0
                }
                ShapeKind::Stripes => (py / period) % 2 == 0 || py + 1 == height,
                ShapeKind::Frame => {
                    x < border || y < border || x > w - border || y > h - border
                }
            };
            on[py * width + px] = inside;
        }
    }
    ShapeMask { width, height, on }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn render_image(index: usize, shapes: &[ShapeKind], image_size: usize, seed: u64) -> ImageRecord {
    let mut rng = image_rng(seed, index);
    let mut image = GrayImage::new(
        image_size,
        (0..image_size * image_size)
            .map(|_| rng.random_range(0..=BACKGROUND_MAX))
            .collect(),
    )
    .expect("pixel count");
    let count = rng.random_range(1..=4usize);
    let max_side = MAX_SIDE.min(image_size);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for slot in 0..count {
        // The first object cycles through classes so class frequencies stay even.
        let class = if slot == 0 {
            index % shapes.len()
        } else {
            rng.random_range(0..shapes.len())
        };
        for _ in 0..PLACEMENT_TRIES {
            let side = rng.random_range(MIN_SIDE..=max_side);
            let aspect = rng.random_range(0.75..1.33f64);
            let height = ((side as f64 * aspect).round() as usize).clamp(MIN_SIDE, max_side);
            let (width, height) = (side, height);
            let x0 = rng.random_range(0..=image_size - width);
            let y0 = rng.random_range(0..=image_size - height);
            let mask = render_shape(shapes[class], width, height);
            let Some((ex0, ey0, ex1, ey1)) = mask.extent() else {
                continue;
            };
            let bbox = BBox::new(
                (x0 + ex0) as f64,
                (y0 + ey0) as f64,
                (x0 + ex1) as f64,
                (y0 + ey1) as f64,
            )
            .expect("non-empty mask");
            if annotations.iter().any(|a| iou(&a.bbox, &bbox) > MAX_PAIR_IOU) {
                continue;
            }
            let intensity = rng.random_range(FOREGROUND_MIN..=255);
            for my in 0..height {
                for mx in 0..width {
                    if mask.get(mx, my) {
                        image.set(x0 + mx, y0 + my, intensity);
                    }
                }
            }
            annotations.push(Annotation {
                bbox,
                class_id: class as u32,
            });
            break;
        }
    }
    ImageRecord {
        path: format!("{}/{index:05}.png", super::IMAGE_DIR),
        image,
        annotations,
    }
}

/// Seeded synthetic shapes dataset: 1-4 objects per image, 12-48 px sides,
/// pairwise IoU at most 0.3. Placement that keeps failing yields fewer objects.
pub fn generate_synthetic(
    num_images: usize,
    class_shapes: &[ShapeKind],
    image_size: usize,
    seed: u64,
) -> Result<DetectionDataset> {
    if class_shapes.len() < 2 {
        return Err(FsceError::Config("need at least two shape classes".into()));
    }
    if image_size < MIN_SIDE {
        return Err(FsceError::Config(format!(
            "image size {image_size} smaller than the minimum object side {MIN_SIDE}"
        )));
    }
    let registry = ClassRegistry::new(class_shapes)?;
    let indices: Vec<usize> = (0..num_images).collect();
    let images = exec::map_ordered(&indices, |&i| render_image(i, class_shapes, image_size, seed));
    DetectionDataset::new(images, registry)
}

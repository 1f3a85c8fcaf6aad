//! On-disk layout:
//!
//! ```text
//! <dir>/classes.txt       "<id> <name> <base|novel>" per line
//! <dir>/annotations.txt   "<image path> [<class> <x1> <y1> <x2> <y2>]..." per line
//! <dir>/images/*.png      8-bit grayscale rasters
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Annotation, ClassInfo, ClassRegistry, DetectionDataset, GrayImage, ImageRecord, Partition, ShapeKind};
use crate::error::{FsceError, Result};
use crate::geometry::BBox;

pub const CLASSES_FILE: &str = "classes.txt";
pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const IMAGE_DIR: &str = "images";

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| FsceError::io(path, e))
}

pub fn save_dataset(dataset: &DetectionDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| FsceError::io(dir, e))?;
    let mut classes = String::new();
    for c in dataset.registry.classes() {
        writeln!(classes, "{} {} {}", c.id, c.shape, c.partition).expect("string write");
    }
    write_file(&dir.join(CLASSES_FILE), classes.as_bytes())?;

    let mut lines = String::new();
    for img in &dataset.images {
        lines.push_str(&img.path);
        for a in &img.annotations {
            let [x1, y1, x2, y2] = a.bbox.to_array();
            write!(
                lines,
                " {} {} {} {} {}",
                a.class_id,
                x1.round() as i64,
                y1.round() as i64,
                x2.round() as i64,
                y2.round() as i64
            )
            .expect("string write");
        }
        lines.push('\n');
        let path = dir.join(&img.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| FsceError::io(parent, e))?;
        }
        let size = img.image.size() as u32;
        image::save_buffer(&path, img.image.pixels(), size, size, image::ExtendedColorType::L8)
            .map_err(|source| FsceError::Image { path: path.clone(), source })?;
    }
    write_file(&dir.join(ANNOTATION_FILE), lines.as_bytes())
}

fn parse_classes(text: &str) -> Result<ClassRegistry> {
    let mut infos = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: &str| FsceError::Parse {
            what: CLASSES_FILE,
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err("expected `<id> <name> <base|novel>`"));
        }
        let id = fields[0].parse::<u32>().map_err(|_| err("bad class id"))?;
        let shape = fields[1].parse::<ShapeKind>().map_err(|e| err(&e.to_string()))?;
        let partition = match fields[2] {
            "base" => Partition::Base,
            "novel" => Partition::Novel,
            _ => return Err(err("partition must be base or novel")),
        };
        infos.push(ClassInfo { id, shape, partition });
    }
    ClassRegistry::from_infos(infos)
}

fn parse_annotation_line(line: &str, n: usize) -> Result<(String, Vec<Annotation>)> {
    let err = |msg: String| FsceError::Parse {
        what: ANNOTATION_FILE,
        line: n + 1,
        msg,
    };
    let mut fields = line.split_whitespace();
    let path = fields.next().ok_or_else(|| err("missing image path".into()))?.to_string();
    let nums: Vec<i64> = fields
        .map(|f| f.parse::<i64>().map_err(|_| err(format!("`{f}` is not an integer"))))
        .collect::<Result<_>>()?;
    if nums.len() % 5 != 0 {
        return Err(err("objects need five integers each".into()));
    }
    let annotations = nums
        .chunks(5)
        .map(|c| {
            let bbox = BBox::new(c[1] as f64, c[2] as f64, c[3] as f64, c[4] as f64)
                .map_err(|e| err(e.to_string()))?;
            let class_id = u32::try_from(c[0]).map_err(|_| err("negative class id".into()))?;
            Ok(Annotation { bbox, class_id })
        })
        .collect::<Result<_>>()?;
    Ok((path, annotations))
}

pub fn load_dataset(dir: &Path) -> Result<DetectionDataset> {
    if !dir.exists() {
        return Err(FsceError::MissingPath(dir.to_path_buf()));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(FsceError::MissingPath(p));
        }
        fs::read_to_string(&p).map_err(|e| FsceError::io(p, e))
    };
    let registry = parse_classes(&read(CLASSES_FILE)?)?;
    let mut images = Vec::new();
    for (n, line) in read(ANNOTATION_FILE)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, annotations) = parse_annotation_line(line, n)?;
        let full = dir.join(&path);
        let raster = image::open(&full)
            .map_err(|source| FsceError::Image { path: full.clone(), source })?
            .into_luma8();
        if raster.width() != raster.height() {
            return Err(FsceError::Config(format!("{} is not square", full.display())));
        }
        let image = GrayImage::new(raster.width() as usize, raster.into_raw())?;
        images.push(ImageRecord { path, image, annotations });
    }
    DetectionDataset::new(images, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_kshot_split, generate_synthetic};

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(40, &ShapeKind::ALL, 64, 5).unwrap();
        let split = build_kshot_split(&ds, &[3, 4], 2, 1).unwrap();
        save_dataset(&split.dataset, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, split.dataset);
    }

    #[test]
    fn annotation_line_format() {
        let (path, anns) = parse_annotation_line("images/00001.png 3 10 12 30 40 1 0 0 5 5", 0).unwrap();
        assert_eq!(path, "images/00001.png");
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].class_id, 3);
        assert_eq!(anns[0].bbox.to_array(), [10.0, 12.0, 30.0, 40.0]);
        assert!(parse_annotation_line("a.png 1 2 3", 0).is_err());
        assert!(parse_annotation_line("a.png 1 2 3 4 x", 0).is_err());
        assert!(parse_annotation_line("a.png 1 5 5 5 9", 0).is_err());
    }

    #[test]
    fn missing_dir_names_path() {
        let err = load_dataset(Path::new("/nonexistent/fsce-data")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/fsce-data"));
    }
}

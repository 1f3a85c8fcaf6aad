//! Proposal embedding export and cluster diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive_head::{dot, norm, NORM_EPS};
use crate::data::DetectionDataset;
use crate::detector::{roi_embeddings, DetectorState, RoiEmbedding};
use crate::error::{FsceError, Result};
use crate::exec;

/// One exported proposal: class, IoU with its ground truth, embedding.
pub type EmbeddingReportRow = RoiEmbedding;

/// Foreground proposal embeddings from up to `max_images` images picked in a
/// seeded order.
pub fn export_embeddings(
    state: &DetectorState,
    dataset: &DetectionDataset,
    max_images: usize,
    seed: u64,
) -> Result<Vec<EmbeddingReportRow>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(max_images);
    let per_image = exec::map_ordered(&order, |&i| roi_embeddings(state, &dataset.images[i]));
    let mut rows = Vec::new();
    for r in per_image {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Nine significant digits.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn embeddings_to_csv(rows: &[EmbeddingReportRow], dim: usize) -> Result<String> {
    let mut out = String::from("class_id,u");
    for k in 0..dim {
        write!(out, ",z_{k}").expect("string write");
    }
    out.push('\n');
    for r in rows {
        if r.z.len() != dim {
            return Err(FsceError::DimensionMismatch {
                context: "embedding export",
                expected: dim,
                actual: r.z.len(),
            });
        }
        write!(out, "{},{}", r.class_id, sig9(r.u)).expect("string write");
        for v in &r.z {
            write!(out, ",{}", sig9(*v)).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings_csv(rows: &[EmbeddingReportRow], dim: usize, path: &Path) -> Result<()> {
    fs::write(path, embeddings_to_csv(rows, dim)?).map_err(|e| FsceError::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingReportRow>> {
    if !path.exists() {
        return Err(FsceError::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| FsceError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| FsceError::Parse {
        what: "embedding csv",
        line: line + 1,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    if !header.starts_with("class_id,u") {
        return Err(err(0, "header must start with class_id,u".into()));
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != dim + 2 {
                return Err(err(n, format!("expected {} fields, got {}", dim + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("`{s}` is not a number")));
            Ok(RoiEmbedding {
                class_id: f[0].parse().map_err(|_| err(n, "bad class id".into()))?,
                u: num(f[1])?,
                z: f[2..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean pairwise cosine inside each class; `None` with fewer than two rows.
    pub within: BTreeMap<u32, Option<f64>>,
    /// Mean cosine over all pairs of rows from different classes.
    pub cross: f64,
    /// Norm of each class's mean unit embedding.
    pub centroid_norms: BTreeMap<u32, f64>,
    pub rows: BTreeMap<u32, usize>,
}

impl ClusterStats {
    /// Mean of the present within-class values over `classes`.
    pub fn mean_within(&self, classes: &[u32]) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|c| self.within.get(c).copied().flatten()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Within- and cross-class cosine statistics of normalized embeddings.
pub fn cluster_statistics(rows: &[EmbeddingReportRow]) -> Result<ClusterStats> {
    let mut by_class: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let n = norm(&r.z);
        if n <= NORM_EPS {
            return Err(FsceError::ZeroNorm("exported embedding"));
        }
        by_class.entry(r.class_id).or_default().push(r.z.iter().map(|v| v / n).collect());
    }
    if by_class.len() < 2 {
        return Err(FsceError::Config(format!(
            "cluster statistics need at least two classes, got {}",
            by_class.len()
        )));
    }
    let mut within = BTreeMap::new();
    let mut centroid_norms = BTreeMap::new();
    for (&c, units) in &by_class {
        let n = units.len();
        let w = (n >= 2).then(|| {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += dot(&units[i], &units[j]);
                }
            }
            s / (n * (n - 1) / 2) as f64
        });
        within.insert(c, w);
        let dim = units[0].len();
        let mut centroid = vec![0.0; dim];
        for u in units {
            for (a, b) in centroid.iter_mut().zip(u) {
                *a += b / n as f64;
            }
        }
        centroid_norms.insert(c, norm(&centroid));
    }
    // sum over cross pairs = sum over class pairs of <sum_a, sum_b>
    let sums: Vec<(usize, Vec<f64>)> = by_class
        .values()
        .map(|units| {
            let mut s = vec![0.0; units[0].len()];
            for u in units {
                for (a, b) in s.iter_mut().zip(u) {
                    *a += b;
                }
            }
            (units.len(), s)
        })
        .collect();
    let (mut total, mut pairs) = (0.0, 0usize);
    for a in 0..sums.len() {
        for b in a + 1..sums.len() {
            total += dot(&sums[a].1, &sums[b].1);
            pairs += sums[a].0 * sums[b].0;
        }
    }
    Ok(ClusterStats {
        within,
        cross: (total / pairs as f64).clamp(-1.0, 1.0),
        centroid_norms,
        rows: by_class.iter().map(|(&c, u)| (c, u.len())).collect(),
    })
}

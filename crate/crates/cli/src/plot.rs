//! PNG scatter of embeddings projected on their two leading principal axes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fsce_core::eval::EmbeddingReportRow;
use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
];

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading eigenvector of `x^T x` by power iteration, orthogonal to `against`.
fn leading_axis(x: &[Vec<f64>], against: Option<&[f64]>) -> Vec<f64> {
    let d = x[0].len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for row in x {
            let p = dot(row, &v);
            next.iter_mut().zip(row).for_each(|(n, r)| *n += p * r);
        }
        if let Some(a) = against {
            let p = dot(&next, a);
            next.iter_mut().zip(a).for_each(|(n, r)| *n -= p * r);
        }
        let n = dot(&next, &next).sqrt();
        if n == 0.0 {
            break;
        }
        v = next.into_iter().map(|e| e / n).collect();
    }
    v
}

pub fn embedding_scatter(rows: &[EmbeddingReportRow], size: u32, path: &Path) -> Result<()> {
    if rows.len() < 2 {
        bail!("need at least two embeddings to plot, got {}", rows.len());
    }
    let d = rows[0].z.len();
    let units: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = dot(&r.z, &r.z).sqrt().max(1e-12);
            r.z.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut mean = vec![0.0; d];
    for u in &units {
        mean.iter_mut().zip(u).for_each(|(m, v)| *m += v / units.len() as f64);
    }
    let centered: Vec<Vec<f64>> = units.iter().map(|u| u.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let a1 = leading_axis(&centered, None);
    let a2 = leading_axis(&centered, Some(&a1));
    let pts: Vec<(f64, f64)> = centered.iter().map(|c| (dot(c, &a1), dot(c, &a2))).collect();
    let span = pts.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1e-12, f64::max);

    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let half = size as f64 / 2.0;
    let scale = 0.9 * half / span;
    for (p, r) in pts.iter().zip(rows) {
        let color = Rgb(PALETTE[r.class_id as usize % PALETTE.len()]);
        let cx = (half + p.0 * scale) as i64;
        let cy = (half - p.1 * scale) as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

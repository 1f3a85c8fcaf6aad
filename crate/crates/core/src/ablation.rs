//! Sweeps over contrastive hyper-parameters. Each (cell, seed) pair is one
//! fine-tune plus evaluation; a failing pair is recorded and the sweep goes on.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cpe::{CpeConfig, Reweight};
use crate::error::Result;
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub temperature: f64,
    pub contrast_dim: usize,
    pub phi: f64,
    pub reweight: Reweight,
}

impl AblationCell {
    pub fn cpe_config(&self, lambda: f64) -> CpeConfig {
        CpeConfig {
            temperature: self.temperature,
            phi: self.phi,
            reweight: self.reweight,
            lambda,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "tau={} dim={} phi={} g={}",
            self.temperature, self.contrast_dim, self.phi, self.reweight
        )
    }
}

impl Default for AblationCell {
    fn default() -> Self {
        let c = CpeConfig::default();
        AblationCell {
            temperature: c.temperature,
            contrast_dim: 128,
            phi: c.phi,
            reweight: c.reweight,
        }
    }
}

/// Temperature {0.07, 0.2, 0.5} crossed with embedding width {128, 256}.
pub fn temperature_width_grid() -> Vec<AblationCell> {
    let mut out = Vec::new();
    for temperature in [0.07, 0.2, 0.5] {
        for contrast_dim in [128, 256] {
            out.push(AblationCell {
                temperature,
                contrast_dim,
                ..AblationCell::default()
            });
        }
    }
    out
}

/// Hard clipping at 0.7 and 0.5, then IoU weighting without a clip.
pub fn consistency_grid() -> Vec<AblationCell> {
    [
        (0.7, Reweight::One),
        (0.5, Reweight::One),
        (0.0, Reweight::Linear),
        (0.0, Reweight::Expm1),
    ]
    .into_iter()
    .map(|(phi, reweight)| AblationCell {
        phi,
        reweight,
        ..AblationCell::default()
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub nap50: f64,
    pub nap75: f64,
    pub nap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<SeedResult>,
    /// Medians over the seeds that succeeded.
    pub median: Option<CellMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Runs `run(cell, seed)` for every pair, in parallel when enabled.
pub fn run_ablation<F>(cells: &[AblationCell], seeds: &[u64], run: F) -> AblationTable
where
    F: Fn(&AblationCell, u64) -> Result<CellMetrics> + Sync + Send,
{
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = exec::map_ordered(&jobs, |&(c, seed)| {
        let r = run(&cells[c], seed);
        SeedResult {
            seed,
            metrics: r.as_ref().ok().copied(),
            error: r.err().map(|e| e.to_string()),
        }
    });
    let mut it = results.into_iter();
    let rows = cells
        .iter()
        .map(|cell| {
            let seeds: Vec<SeedResult> = it.by_ref().take(seeds.len()).collect();
            let ok: Vec<CellMetrics> = seeds.iter().filter_map(|s| s.metrics).collect();
            let med = |f: fn(&CellMetrics) -> f64| median(&mut ok.iter().map(f).collect::<Vec<_>>());
            let median = match (med(|m| m.nap50), med(|m| m.nap75), med(|m| m.nap)) {
                (Some(nap50), Some(nap75), Some(nap)) => Some(CellMetrics { nap50, nap75, nap }),
                _ => None,
            };
            AblationRow {
                cell: *cell,
                seeds,
                median,
            }
        })
        .collect();
    AblationTable { rows }
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

impl AblationTable {
    /// Fixed-width text table: one row per cell, per-seed nAP50 then medians.
    pub fn to_text(&self) -> String {
        let seeds: Vec<u64> = self.rows.first().map_or_else(Vec::new, |r| r.seeds.iter().map(|s| s.seed).collect());
        let mut out = format!("{:<6} {:<5} {:<5} {:<7}", "tau", "dim", "phi", "g");
        for s in &seeds {
            write!(out, " {:>9}", format!("nAP50@{s}")).expect("string write");
        }
        writeln!(out, " {:>8} {:>8} {:>8}", "nAP50", "nAP75", "nAP").expect("string write");
        for r in &self.rows {
            write!(
                out,
                "{:<6} {:<5} {:<5} {:<7}",
                r.cell.temperature, r.cell.contrast_dim, r.cell.phi, r.cell.reweight
            )
            .expect("string write");
            for s in &r.seeds {
                let v = if s.error.is_some() {
                    "failed".to_string()
                } else {
                    fmt_metric(s.metrics.map(|m| m.nap50))
                };
                write!(out, " {v:>9}").expect("string write");
            }
            writeln!(
                out,
                " {:>8} {:>8} {:>8}",
                fmt_metric(r.median.map(|m| m.nap50)),
                fmt_metric(r.median.map(|m| m.nap75)),
                fmt_metric(r.median.map(|m| m.nap))
            )
            .expect("string write");
        }
        for r in &self.rows {
            for s in &r.seeds {
                if let Some(e) = &s.error {
                    writeln!(out, "# {} seed {}: {e}", r.cell.label(), s.seed).expect("string write");
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FsceError;

    #[test]
    fn grids_have_expected_shapes() {
        let t = temperature_width_grid();
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|c| c.phi == 0.7 && c.reweight == Reweight::One));
        let c = consistency_grid();
        assert_eq!(c.len(), 4);
        assert_eq!((c[2].phi, c[2].reweight), (0.0, Reweight::Linear));
        assert_eq!((c[3].phi, c[3].reweight), (0.0, Reweight::Expm1));
    }

    #[test]
    fn failures_are_recorded_and_sweep_continues() {
        let cells = temperature_width_grid();
        let table = run_ablation(&cells, &[1, 2, 3], |cell, seed| {
            if cell.temperature == 0.5 && seed == 2 {
                return Err(FsceError::Config("boom".into()));
            }
            Ok(CellMetrics {
                nap50: seed as f64 / 10.0,
                nap75: cell.temperature,
                nap: 0.0,
            })
        });
        assert_eq!(table.rows.len(), 6);
        let failed = &table.rows[4];
        assert!(failed.seeds[1].error.as_deref().unwrap().contains("boom"));
        assert!(failed.seeds[1].metrics.is_none());
        assert_eq!(failed.median.unwrap().nap50, 0.2);
        assert_eq!(table.rows[0].median.unwrap().nap50, 0.2);
        let text = table.to_text();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 7);
        assert!(text.contains("failed") && text.contains("boom"));
        let back: AblationTable = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn empty_grid_is_empty_table() {
        let t = run_ablation(&[], &[0], |_, _| unreachable!());
        assert!(t.rows.is_empty());
        assert_eq!(t.to_text().lines().count(), 1);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}

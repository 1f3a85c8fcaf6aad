//! Contrastive proposal encoding loss.
//!
//! For a batch of foreground proposals `{z_i, u_i, y_i}` the loss is
//!
//! ```text
//! L     = 1/N * sum_i f(u_i) * L_i
//! L_i   = -1/(N_{y_i} - 1) * sum_{j != i, y_j = y_i} log( exp(s_ij) / sum_{k != i} exp(s_ik) )
//! s_ij  = <z_i/|z_i|, z_j/|z_j|> / tau
//! f(u)  = [u >= phi] * g(u)
//! ```
//!
//! Anchors without a same-label partner contribute zero. Every batch member
//! stays in every denominator regardless of its own weight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive_head::{dot, ContrastiveEmbedding, NORM_EPS};
use crate::error::{FsceError, Result};

/// One foreground proposal entering the contrastive batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub z: ContrastiveEmbedding,
    /// IoU with the matched ground truth.
    pub u: f64,
    /// Foreground class id.
    pub y: u32,
}

impl ProposalRecord {
    pub fn new(z: Vec<f64>, u: f64, y: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) {
            return Err(FsceError::Config(format!("proposal IoU {u} outside [0, 1]")));
        }
        Ok(ProposalRecord {
            z: ContrastiveEmbedding::new(z),
            u,
            y,
        })
    }
}

/// Re-weighting `g(u)` applied to proposals that pass the IoU cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reweight {
    /// `g(u) = 1`
    One,
    /// `g(u) = u`
    Linear,
    /// `g(u) = e^u - 1`
    Expm1,
}

impl Reweight {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Reweight::One => 1.0,
            Reweight::Linear => u,
            Reweight::Expm1 => u.exp_m1(),
        }
    }

    pub const ALL: [Reweight; 3] = [Reweight::One, Reweight::Linear, Reweight::Expm1];
}

impl fmt::Display for Reweight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reweight::One => "one",
            Reweight::Linear => "linear",
            Reweight::Expm1 => "expm1",
        })
    }
}

impl FromStr for Reweight {
    type Err = FsceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(Reweight::One),
            "linear" => Ok(Reweight::Linear),
            "expm1" => Ok(Reweight::Expm1),
            other => Err(FsceError::Config(format!(
                "unknown reweight mode `{other}` (expected one, linear or expm1)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpeConfig {
    pub temperature: f64,
    /// Consistency IoU threshold.
    pub phi: f64,
    pub reweight: Reweight,
    /// Weight of the contrastive term in the total objective.
    pub lambda: f64,
}

impl Default for CpeConfig {
    fn default() -> Self {
        CpeConfig {
            temperature: 0.2,
            phi: 0.7,
            reweight: Reweight::One,
            lambda: 0.5,
        }
    }
}

impl CpeConfig {
    /// The low-shot alternative: keep every proposal, weight linearly by IoU.
    pub fn low_shot() -> Self {
        CpeConfig {
            phi: 0.0,
            reweight: Reweight::Linear,
            ..CpeConfig::default()
        }
    }

    /// `lambda` may be zero here; that disables the contrastive term.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(FsceError::Config(format!(
                "cpe.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(FsceError::Config(format!("cpe.phi must be in [0, 1], got {}", self.phi)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(FsceError::Config(format!("cpe.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn is_enabled(&self) -> bool {
        self.lambda > 0.0
    }
}

/// `f(u) = [u >= phi] * g(u)`.
pub fn consistency_weight(u: f64, cfg: &CpeConfig) -> f64 {
    if u >= cfg.phi {
        cfg.reweight.apply(u)
    } else {
        0.0
    }
}

fn unit_embeddings(batch: &[ProposalRecord]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(batch.len());
    let mut norms = Vec::with_capacity(batch.len());
    let dim = batch.first().map_or(0, |r| r.z.dim());
    for r in batch {
        if r.z.dim() != dim {
            return Err(FsceError::DimensionMismatch {
                context: "contrastive batch",
                expected: dim,
                actual: r.z.dim(),
            });
        }
        let n = r.z.norm();
        if !(n > NORM_EPS) || !n.is_finite() {
            return Err(FsceError::ZeroNorm("contrastive embedding"));
        }
        units.push(r.z.values.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Similarity logits `s_ik` for one anchor.
fn anchor_logits(units: &[Vec<f64>], i: usize, tau: f64) -> Vec<f64> {
    units.iter().map(|uk| dot(&units[i], uk) / tau).collect()
}

/// Per-anchor loss and `dL_i/ds_ik` for every `k` (zero at `k == i`).
fn anchor_term(batch: &[ProposalRecord], logits: &[f64], i: usize) -> (f64, Vec<f64>) {
    let n = batch.len();
    let positives = (0..n).filter(|&j| j != i && batch[j].y == batch[i].y).count();
    if positives == 0 {
        return (0.0, vec![0.0; n]);
    }
    let max = (0..n)
        .filter(|&k| k != i)
        .map(|k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for k in 0..n {
        if k != i {
            denom += (logits[k] - max).exp();
        }
    }
    let lse = max + denom.ln();
    let inv_pos = 1.0 / positives as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        if k == i {
            continue;
        }
        let p = (logits[k] - max).exp() / denom;
        grad[k] = p;
        if batch[k].y == batch[i].y {
            loss += lse - logits[k];
            grad[k] -= inv_pos;
        }
    }
    (loss * inv_pos, grad)
}

/// Loss term of anchor `i`. Zero when the anchor has no same-label partner.
pub fn per_anchor_loss(batch: &[ProposalRecord], i: usize, tau: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(FsceError::Config("per-anchor loss needs a batch of at least 2".into()));
    }
    if i >= batch.len() {
        return Err(FsceError::Config(format!("anchor {i} out of range")));
    }
    let (units, _) = unit_embeddings(batch)?;
    let logits = anchor_logits(&units, i, tau);
    Ok(anchor_term(batch, &logits, i).0.max(0.0))
}

/// Consistency-weighted mean of per-anchor losses.
pub fn cpe_loss(batch: &[ProposalRecord], cfg: &CpeConfig) -> Result<f64> {
    Ok(cpe_loss_with_grad(batch, cfg)?.0)
}

/// Loss together with `dL/dz_i` for every record, in batch order.
pub fn cpe_loss_with_grad(batch: &[ProposalRecord], cfg: &CpeConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let n = batch.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let (units, norms) = unit_embeddings(batch)?;
    let dim = units[0].len();
    let mut total = 0.0;
    let mut d_unit = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let w = consistency_weight(batch[i].u, cfg);
        if w == 0.0 {
            continue;
        }
        let logits = anchor_logits(&units, i, cfg.temperature);
        let (loss, g) = anchor_term(batch, &logits, i);
        total += w * loss;
        let scale = w / (n as f64 * cfg.temperature);
        for k in 0..n {
            if g[k] == 0.0 {
                continue;
            }
            let c = scale * g[k];
            for d in 0..dim {
                d_unit[i][d] += c * units[k][d];
                d_unit[k][d] += c * units[i][d];
            }
        }
    }
    // Project through the normalization: dz = (I - z^ z^T) dz^ / |z|
    let grads = d_unit
        .into_iter()
        .zip(&units)
        .zip(&norms)
        .map(|((g, u), &nrm)| {
            let radial = dot(&g, u);
            g.iter().zip(u).map(|(gd, ud)| (gd - radial * ud) / nrm).collect()
        })
        .collect();
    Ok(((total / n as f64).max(0.0), grads))
}

/// `L = L_rpn + L_cls + L_reg + lambda * L_cpe`.
pub fn total_finetune_loss(l_rpn: f64, l_cls: f64, l_reg: f64, l_cpe: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [
        ("l_rpn", l_rpn),
        ("l_cls", l_cls),
        ("l_reg", l_reg),
        ("l_cpe", l_cpe),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(FsceError::NonFiniteLoss(name));
        }
    }
    Ok(l_rpn + l_cls + l_reg + lambda * l_cpe)
}

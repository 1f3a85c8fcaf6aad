//! Projection of RoI features into the contrastive embedding space, and the
//! cosine-similarity box classifier.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsceError, Result};
use crate::nn::{Linear, Tensor};

/// Default cosine logit scale.
pub const DEFAULT_ALPHA: f64 = 20.0;

/// Norms below this are treated as zero.
pub(crate) const NORM_EPS: f64 = 1e-12;

/// Post-ReLU RoI feature vector `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    values: Vec<f64>,
}

impl RoiFeature {
    /// Fails on negative or non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FsceError::Config(
                "RoI features must be finite and non-negative".into(),
            ));
        }
        Ok(RoiFeature { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Contrastive embedding `z`. Not length-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveEmbedding {
    pub values: Vec<f64>,
}

impl ContrastiveEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        ContrastiveEmbedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single affine projection from `D_R` to `D_C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveHead {
    pub proj: Linear,
}

impl ContrastiveHead {
    /// Zero-mean Gaussian weights with std `1/sqrt(D_R)`, zero bias.
    pub fn new<R: Rng + ?Sized>(roi_dim: usize, contrast_dim: usize, rng: &mut R) -> Self {
        ContrastiveHead {
            proj: Linear::new(roi_dim, contrast_dim, 1.0 / (roi_dim as f64).sqrt(), rng),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape.len() != 2 || bias.shape != [weight.shape[0]] {
            return Err(FsceError::Config("contrastive head shape".into()));
        }
        Ok(ContrastiveHead {
            proj: Linear { weight, bias },
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            weight.data[i * dim + i] = 1.0;
        }
        ContrastiveHead {
            proj: Linear {
                weight,
                bias: Tensor::zeros(&[dim]),
            },
        }
    }

    pub fn roi_dim(&self) -> usize {
        self.proj.input_dim()
    }

    pub fn contrast_dim(&self) -> usize {
        self.proj.output_dim()
    }

    /// `z = W x + b`, accumulated in `f64`.
    pub fn encode(&self, x: &RoiFeature) -> Result<ContrastiveEmbedding> {
        if x.dim() != self.roi_dim() {
            return Err(FsceError::DimensionMismatch {
                context: "contrastive head input",
                expected: self.roi_dim(),
                actual: x.dim(),
            });
        }
        let d = self.roi_dim();
        let values = self
            .proj
            .bias
            .data
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                let row = &self.proj.weight.data[o * d..(o + 1) * d];
                b as f64 + row.iter().zip(x.values()).map(|(&w, v)| w as f64 * v).sum::<f64>()
            })
            .collect();
        Ok(ContrastiveEmbedding { values })
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        self.proj.forward(x)
    }
}

/// Per-class prototypes `w_j` (background included) and scale `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    /// `[classes, D_R]`, stored unnormalized.
    pub prototypes: Tensor,
    pub alpha: f64,
}

impl CosineClassifier {
    pub fn new(prototypes: Tensor, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(FsceError::Config(format!("cosine scale must be > 0, got {alpha}")));
        }
        if prototypes.shape.len() != 2 {
            return Err(FsceError::Config("prototype matrix must be 2-D".into()));
        }
        let c = CosineClassifier { prototypes, alpha };
        for j in 0..c.num_classes() {
            if norm_f32(c.prototype(j)) <= NORM_EPS {
                return Err(FsceError::ZeroNorm("cosine classifier prototype"));
            }
        }
        Ok(c)
    }

    /// Gaussian prototypes with entry std `1/sqrt(D_R)`, so each has roughly unit norm.
    pub fn random<R: Rng + ?Sized>(classes: usize, roi_dim: usize, alpha: f64, rng: &mut R) -> Self {
        let prototypes = Tensor::randn(&[classes, roi_dim], 1.0 / (roi_dim as f64).sqrt(), rng);
        CosineClassifier { prototypes, alpha }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape[1]
    }

    pub fn prototype(&self, j: usize) -> &[f32] {
        let d = self.dim();
        &self.prototypes.data[j * d..(j + 1) * d]
    }

    /// `alpha * cos(x, w_j)` for every class.
    pub fn cosine_logits(&self, x: &RoiFeature) -> Result<Vec<f64>> {
        if x.dim() != self.dim() {
            return Err(FsceError::DimensionMismatch {
                context: "cosine classifier input",
                expected: self.dim(),
                actual: x.dim(),
            });
        }
        let xn = norm(x.values());
        if xn <= NORM_EPS {
            return Err(FsceError::ZeroNorm("RoI feature"));
        }
        (0..self.num_classes())
            .map(|j| {
                let w = self.prototype(j);
                let wn = norm_f32(w);
                if wn <= NORM_EPS {
                    return Err(FsceError::ZeroNorm("cosine classifier prototype"));
                }
                let d: f64 = w.iter().zip(x.values()).map(|(&a, b)| a as f64 * b).sum();
                Ok((self.alpha * d / (xn * wn)).clamp(-self.alpha, self.alpha))
            })
            .collect()
    }

    /// Batched logits for training and inference. Rows with a dead
    /// (zero-norm) feature get all-zero logits instead of an error.
    pub fn forward_batch(&self, x: ArrayView2<'_, f32>) -> CosineForward {
        let n = x.nrows();
        let c = self.num_classes();
        let d = self.dim();
        let unit_w: Vec<Vec<f64>> = (0..c)
            .map(|j| {
                let w = self.prototype(j);
                let wn = norm_f32(w).max(NORM_EPS);
                w.iter().map(|&v| v as f64 / wn).collect()
            })
            .collect();
        let mut unit_x = vec![vec![0.0; d]; n];
        let mut x_norm = vec![0.0; n];
        let mut logits = Array2::<f64>::zeros((n, c));
        for (i, row) in x.rows().into_iter().enumerate() {
            let xn = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            x_norm[i] = xn;
            if xn <= NORM_EPS {
                continue;
            }
            for (u, &v) in unit_x[i].iter_mut().zip(row.iter()) {
                *u = v as f64 / xn;
            }
            for j in 0..c {
                logits[[i, j]] = self.alpha * dot(&unit_x[i], &unit_w[j]);
            }
        }
        CosineForward {
            logits,
            unit_x,
            unit_w,
            x_norm,
        }
    }

    /// Backward of [`forward_batch`](Self::forward_batch) given `dL/dlogits`.
    pub fn backward_batch(
        &self,
        fwd: &CosineForward,
        dlogits: &Array2<f64>,
        grad: &mut Tensor,
        want_dx: bool,
    ) -> Option<Array2<f32>> {
        let (n, c) = dlogits.dim();
        let d = self.dim();
        let mut dx = want_dx.then(|| Array2::<f32>::zeros((n, d)));
        let w_norms: Vec<f64> = (0..c).map(|j| norm_f32(self.prototype(j)).max(NORM_EPS)).collect();
        for i in 0..n {
            if fwd.x_norm[i] <= NORM_EPS {
                continue;
            }
            let xh = &fwd.unit_x[i];
            let mut gx = vec![0.0f64; d];
            for j in 0..c {
                let g = dlogits[[i, j]];
                if g == 0.0 {
                    continue;
                }
                let wh = &fwd.unit_w[j];
                let cos = fwd.logits[[i, j]] / self.alpha;
                // d cos / d w = (x^ - cos w^) / |w|
                let scale_w = g * self.alpha / w_norms[j];
                let gw = &mut grad.data[j * d..(j + 1) * d];
                for k in 0..d {
                    gw[k] += (scale_w * (xh[k] - cos * wh[k])) as f32;
                }
                if want_dx {
                    let scale_x = g * self.alpha / fwd.x_norm[i];
                    for k in 0..d {
                        gx[k] += scale_x * (wh[k] - cos * xh[k]);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                for (o, v) in dx.row_mut(i).iter_mut().zip(&gx) {
                    *o = *v as f32;
                }
            }
        }
        dx
    }

    /// Appends new prototypes (e.g. for novel classes) before the last row,
    /// which is reserved for background.
    pub fn insert_before_background(&mut self, new_rows: &Tensor) {
        let d = self.dim();
        assert_eq!(new_rows.shape[1], d);
        let c = self.num_classes();
        let mut data = Vec::with_capacity((c + new_rows.shape[0]) * d);
        data.extend_from_slice(&self.prototypes.data[..(c - 1) * d]);
        data.extend_from_slice(&new_rows.data);
        data.extend_from_slice(&self.prototypes.data[(c - 1) * d..]);
        self.prototypes = Tensor {
            shape: vec![c + new_rows.shape[0], d],
            data,
        };
    }
}

/// Saved state of a batched cosine forward pass.
#[derive(Debug, Clone)]
pub struct CosineForward {
    pub logits: Array2<f64>,
    unit_x: Vec<Vec<f64>>,
    unit_w: Vec<Vec<f64>>,
    x_norm: Vec<f64>,
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt()
}

/// Pairwise cosine similarity between all prototypes.
pub fn prototype_similarity_matrix(weights: &CosineClassifier) -> Result<Vec<Vec<f64>>> {
    let c = weights.num_classes();
    if c < 2 {
        return Err(FsceError::Config(
            "prototype similarity needs at least two classes".into(),
        ));
    }
    let units: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let w = weights.prototype(j);
            let n = norm_f32(w);
            if n <= NORM_EPS {
                return Err(FsceError::ZeroNorm("cosine classifier prototype"));
            }
            Ok(w.iter().map(|&v| v as f64 / n).collect())
        })
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; c]; c];
    for i in 0..c {
        m[i][i] = 1.0;
        for j in i + 1..c {
            let v = dot(&units[i], &units[j]).clamp(-1.0, 1.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

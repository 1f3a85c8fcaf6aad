//! Minimal dense layers with hand-written backward passes.
//!
//! Activations are row-major `f32`. Matrix products go through `ndarray`,
//! which is single-threaded and deterministic for a fixed input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Named parameter storage: a shape plus row-major `f32` data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng) as f32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// View as a `rows x cols` matrix where `rows` is the leading dimension.
    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        let rows = self.shape[0];
        let cols = self.data.len() / rows.max(1);
        ArrayView2::from_shape((rows, cols), &self.data).expect("tensor shape")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        let rows = self.shape[0];
        let cols = self.data.len() / rows.max(1);
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("tensor shape")
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Fully connected layer `y = x W^T + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-style initialization scaled by fan-in; zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[output, input], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        for mut row in y.rows_mut() {
            row.assign(&ndarray::aview1(&self.bias.data));
        }
        general_mat_mul(1.0, &x, &self.weight.matrix().t(), 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f32>,
        dy: ArrayView2<'_, f32>,
        grad: &mut Linear,
        want_dx: bool,
    ) -> Option<Array2<f32>> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight.matrix_mut());
        for row in dy.rows() {
            for (g, &d) in grad.bias.data.iter_mut().zip(row.iter()) {
                *g += d;
            }
        }
        want_dx.then(|| dy.dot(&self.weight.matrix()))
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Channel-major activation volume `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.channels, self.height * self.width), &self.data)
            .expect("feature map shape")
    }
}

/// Zero-padded 3x3 convolution with configurable stride, via im2col.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in * 9]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Saved forward state for [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f32>,
    in_shape: (usize, usize, usize),
}

const K: usize = 3;
const PAD: usize = 1;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (input * K * K) as f64;
        Conv2d {
            weight: Tensor::randn(&[output, input * K * K], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            stride: self.stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1] / (K * K)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * PAD - K) / self.stride + 1
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f32> {
        let (ho, wo) = (self.out_size(x.height), self.out_size(x.width));
        let mut cols = Array2::zeros((x.channels * K * K, ho * wo));
        let cols_s = cols.as_slice_mut().expect("contiguous");
        for c in 0..x.channels {
            for ky in 0..K {
                for kx in 0..K {
                    let row = (c * K + ky) * K + kx;
                    let dst = &mut cols_s[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &x.data[(c * x.height + iy as usize) * x.width..];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, (c_in, h, w): (usize, usize, usize)) -> FeatureMap {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let mut out = FeatureMap::zeros(c_in, h, w);
        let cols_s = cols.as_slice().expect("contiguous");
        for c in 0..c_in {
            for ky in 0..K {
                for kx in 0..K {
                    let row = (c * K + ky) * K + kx;
                    let src = &cols_s[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                out.data[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels(), "conv input channels");
        let (ho, wo) = (self.out_size(x.height), self.out_size(x.width));
        let cols = self.im2col(x);
        let mut y = Array2::zeros((self.out_channels(), ho * wo));
        for (mut row, &b) in y.rows_mut().into_iter().zip(&self.bias.data) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight.matrix(), &cols, 1.0, &mut y);
        let out = FeatureMap {
            channels: self.out_channels(),
            height: ho,
            width: wo,
            data: y.into_raw_vec_and_offset().0,
        };
        (
            out,
            ConvCache {
                cols,
                in_shape: (x.channels, x.height, x.width),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &FeatureMap,
        grad: &mut Conv2d,
        want_dx: bool,
    ) -> Option<FeatureMap> {
        let dy_m = dy.view();
        general_mat_mul(1.0, &dy_m, &cache.cols.t(), 1.0, &mut grad.weight.matrix_mut());
        for (g, row) in grad.bias.data.iter_mut().zip(dy_m.rows()) {
            *g += row.sum();
        }
        if !want_dx {
            return None;
        }
        let dcols = self.weight.matrix().t().dot(&dy_m);
        Some(self.col2im(&dcols, cache.in_shape))
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

pub fn relu_inplace(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` wherever the post-activation output was clamped.
pub fn relu_backward_inplace(grad: &mut [f32], activated: &[f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Smooth L1 with transition point `beta`; returns `(loss, dloss/dx)`.
pub fn smooth_l1(diff: f64, beta: f64) -> (f64, f64) {
    let a = diff.abs();
    if a < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (a - 0.5 * beta, diff.signum())
    }
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let p = 1.0 / (1.0 + (-logit).exp());
    (loss, p - target)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

//! Layer primitives with explicit forward/backward passes.
//!
//! Activations are `[channels × frames]` matrices. Every `backward` takes the
//! upstream gradient and the cached forward values, accumulates parameter
//! gradients into a layer of the same type, and returns the input gradient.

use ndarray::{Array, Array1, Array2, Axis, Dimension};
use rand::Rng;

/// Callback over named parameter tensors: `(name, shape, row-major data)`.
pub type Visitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

pub(crate) fn visit<D: Dimension>(prefix: &str, name: &str, a: &Array<f64, D>, f: &mut Visitor) {
    let data = a.as_slice().expect("parameters are contiguous");
    f(&format!("{prefix}{name}"), a.shape(), data);
}

pub(crate) fn visit_mut<D: Dimension>(
    prefix: &str,
    name: &str,
    a: &mut Array<f64, D>,
    f: &mut VisitorMut,
) {
    let shape = a.shape().to_vec();
    let data = a.as_slice_mut().expect("parameters are contiguous");
    f(&format!("{prefix}{name}"), &shape, data);
}

pub(crate) fn uniform<D: Dimension, R: Rng>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    bound: f64,
    rng: &mut R,
) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

pub const GLN_EPS: f64 = 1e-8;

/// Global layer norm: statistics over all channels and frames, learned
/// per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct GlnCache {
    normalized: Array2<f64>,
    inv_std: f64,
}

impl GlobalLayerNorm {
    pub fn new(channels: usize) -> Self {
        GlobalLayerNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        GlobalLayerNorm {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, GlnCache) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + GLN_EPS).sqrt();
        let normalized = x.mapv(|v| (v - mean) * inv_std);
        let mut y = normalized.clone();
        for ((mut row, &g), &b) in y.rows_mut().into_iter().zip(&self.gamma).zip(&self.beta) {
            row.mapv_inplace(|v| g * v + b);
        }
        (y, GlnCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &GlnCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let xhat = &cache.normalized;
        grad.gamma += &(dy * xhat).sum_axis(Axis(1));
        grad.beta += &dy.sum_axis(Axis(1));
        let mut dxhat = dy.clone();
        for (mut row, &g) in dxhat.rows_mut().into_iter().zip(&self.gamma) {
            row *= g;
        }
        let n = dy.len() as f64;
        let mean_d = dxhat.sum() / n;
        let mean_dx = (&dxhat * xhat).sum() / n;
        (dxhat - mean_d - xhat * mean_dx) * cache.inv_std
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor) {
        visit(prefix, "gamma", &self.gamma, f);
        visit(prefix, "beta", &self.beta, f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut) {
        visit_mut(prefix, "gamma", &mut self.gamma, f);
        visit_mut(prefix, "beta", &mut self.beta, f);
    }
}

/// Pointwise (kernel 1) convolution, i.e. a per-frame linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv1x1 {
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Conv1x1 {
            weight: uniform((output, input), bound, rng),
            bias: uniform(output, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Conv1x1 {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(x);
        for (mut row, &b) in y.rows_mut().into_iter().zip(&self.bias) {
            row += b;
        }
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        grad.weight += &dy.dot(&x.t());
        grad.bias += &dy.sum_axis(Axis(1));
        self.weight.t().dot(dy)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor) {
        visit(prefix, "weight", &self.weight, f);
        visit(prefix, "bias", &self.bias, f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut) {
        visit_mut(prefix, "weight", &mut self.weight, f);
        visit_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// Dilated depthwise convolution with symmetric zero padding; output length
/// equals input length. Kernel size must be odd.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv {
    /// `[channels × kernel]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub dilation: usize,
}

impl DepthwiseConv {
    pub fn init<R: Rng>(channels: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        DepthwiseConv {
            weight: uniform((channels, kernel), bound, rng),
            bias: uniform(channels, bound, rng),
            dilation,
        }
    }

    pub fn zeros(channels: usize, kernel: usize, dilation: usize) -> Self {
        DepthwiseConv {
            weight: Array2::zeros((channels, kernel)),
            bias: Array1::zeros(channels),
            dilation,
        }
    }

    /// Frame offsets of each tap relative to the output frame.
    fn offsets(&self) -> impl Iterator<Item = (usize, isize)> {
        let k = self.weight.ncols();
        let half = (k / 2) as isize;
        let d = self.dilation as isize;
        (0..k).map(move |j| (j, (j as isize - half) * d))
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (channels, frames) = x.dim();
        let mut y = Array2::zeros((channels, frames));
        for c in 0..channels {
            let xr = x.row(c);
            let mut yr = y.row_mut(c);
            yr.fill(self.bias[c]);
            for (j, off) in self.offsets() {
                let w = self.weight[[c, j]];
                for t in 0..frames {
                    let src = t as isize + off;
                    if src >= 0 && (src as usize) < frames {
                        yr[t] += w * xr[src as usize];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let (channels, frames) = x.dim();
        let mut dx = Array2::zeros((channels, frames));
        for c in 0..channels {
            grad.bias[c] += dy.row(c).sum();
            for (j, off) in self.offsets() {
                let w = self.weight[[c, j]];
                let mut dw = 0.0;
                for t in 0..frames {
                    let src = t as isize + off;
                    if src >= 0 && (src as usize) < frames {
                        let g = dy[[c, t]];
                        dw += g * x[[c, src as usize]];
                        dx[[c, src as usize]] += w * g;
                    }
                }
                grad.weight[[c, j]] += dw;
            }
        }
        dx
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor) {
        visit(prefix, "weight", &self.weight, f);
        visit(prefix, "bias", &self.bias, f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut) {
        visit_mut(prefix, "weight", &mut self.weight, f);
        visit_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// Leaky rectifier with one learned negative slope shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub alpha: Array1<f64>,
}

impl PRelu {
    pub fn new() -> Self {
        PRelu {
            alpha: Array1::from_elem(1, 0.25),
        }
    }

    pub fn zeros() -> Self {
        PRelu {
            alpha: Array1::zeros(1),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let a = self.alpha[0];
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let a = self.alpha[0];
        let mut da = 0.0;
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
            if v <= 0.0 {
                da += *d * v;
                *d *= a;
            }
        });
        grad.alpha[0] += da;
        dx
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor) {
        visit(prefix, "alpha", &self.alpha, f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut) {
        visit_mut(prefix, "alpha", &mut self.alpha, f);
    }
}

impl Default for PRelu {
    fn default() -> Self {
        Self::new()
    }
}

/// `1×1 conv → PReLU → gLN → depthwise conv → PReLU → gLN → 1×1 conv`,
/// added back onto the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv_in: Conv1x1,
    pub act_in: PRelu,
    pub norm_in: GlobalLayerNorm,
    pub depthwise: DepthwiseConv,
    pub act_mid: PRelu,
    pub norm_mid: GlobalLayerNorm,
    pub conv_out: Conv1x1,
}

pub struct BlockCache {
    input: Array2<f64>,
    pre_act_in: Array2<f64>,
    norm_in: GlnCache,
    normed_in: Array2<f64>,
    pre_act_mid: Array2<f64>,
    norm_mid: GlnCache,
    normed_mid: Array2<f64>,
}

impl ResidualBlock {
    pub fn init<R: Rng>(
        channels: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        ResidualBlock {
            conv_in: Conv1x1::init(channels, hidden, rng),
            act_in: PRelu::new(),
            norm_in: GlobalLayerNorm::new(hidden),
            depthwise: DepthwiseConv::init(hidden, kernel, dilation, rng),
            act_mid: PRelu::new(),
            norm_mid: GlobalLayerNorm::new(hidden),
            conv_out: Conv1x1::init(hidden, channels, rng),
        }
    }

    pub fn zeros(channels: usize, hidden: usize, kernel: usize, dilation: usize) -> Self {
        ResidualBlock {
            conv_in: Conv1x1::zeros(channels, hidden),
            act_in: PRelu::zeros(),
            norm_in: GlobalLayerNorm::zeros(hidden),
            depthwise: DepthwiseConv::zeros(hidden, kernel, dilation),
            act_mid: PRelu::zeros(),
            norm_mid: GlobalLayerNorm::zeros(hidden),
            conv_out: Conv1x1::zeros(hidden, channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let pre_act_in = self.conv_in.forward(x);
        let (normed_in, norm_in) = self.norm_in.forward(&self.act_in.forward(&pre_act_in));
        let pre_act_mid = self.depthwise.forward(&normed_in);
        let (normed_mid, norm_mid) = self.norm_mid.forward(&self.act_mid.forward(&pre_act_mid));
        let y = x + &self.conv_out.forward(&normed_mid);
        let cache = BlockCache {
            input: x.clone(),
            pre_act_in,
            norm_in,
            normed_in,
            pre_act_mid,
            norm_mid,
            normed_mid,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let d = self.conv_out.backward(&cache.normed_mid, dy, &mut grad.conv_out);
        let d = self.norm_mid.backward(&cache.norm_mid, &d, &mut grad.norm_mid);
        let d = self.act_mid.backward(&cache.pre_act_mid, &d, &mut grad.act_mid);
        let d = self.depthwise.backward(&cache.normed_in, &d, &mut grad.depthwise);
        let d = self.norm_in.backward(&cache.norm_in, &d, &mut grad.norm_in);
        let d = self.act_in.backward(&cache.pre_act_in, &d, &mut grad.act_in);
        self.conv_in.backward(&cache.input, &d, &mut grad.conv_in) + dy
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor) {
        self.conv_in.visit(&format!("{prefix}conv_in."), f);
        self.act_in.visit(&format!("{prefix}act_in."), f);
        self.norm_in.visit(&format!("{prefix}norm_in."), f);
        self.depthwise.visit(&format!("{prefix}depthwise."), f);
        self.act_mid.visit(&format!("{prefix}act_mid."), f);
        self.norm_mid.visit(&format!("{prefix}norm_mid."), f);
        self.conv_out.visit(&format!("{prefix}conv_out."), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut) {
        self.conv_in.visit_mut(&format!("{prefix}conv_in."), f);
        self.act_in.visit_mut(&format!("{prefix}act_in."), f);
        self.norm_in.visit_mut(&format!("{prefix}norm_in."), f);
        self.depthwise.visit_mut(&format!("{prefix}depthwise."), f);
        self.act_mid.visit_mut(&format!("{prefix}act_mid."), f);
        self.norm_mid.visit_mut(&format!("{prefix}norm_mid."), f);
        self.conv_out.visit_mut(&format!("{prefix}conv_out."), f);
    }
}

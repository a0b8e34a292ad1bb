//! Layer primitives with hand-written reverse passes.
//!
//! Every layer consumes its input tensor and, in training mode, returns a
//! cache holding exactly what its backward pass needs. Parameter gradients
//! are returned in the same order as [`Op::params`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use super::Mode;
use crate::error::{invalid, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Kaiming-uniform bound for ReLU-family layers: `sqrt(6 / fan_in)`.
fn kaiming(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Dense convolution with square kernel, `kernel / 2` zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `cout × (cin · kernel²)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            cin,
            cout,
            kernel,
            stride,
            weight: kaiming(rng, fan_in, cout * fan_in),
            bias: vec![0.0; cout],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        ((h + 2 * pad - self.kernel) / self.stride + 1, (w + 2 * pad - self.kernel) / self.stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Per-sample `(cin·k²) × (ho·wo)` column matrices, concatenated.
    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (h, w) = (x.h(), x.w());
        let rows = self.patch_len();
        let mut cols = vec![0.0; x.n() * rows * ho * wo];
        for n in 0..x.n() {
            let base = n * rows * ho * wo;
            for ci in 0..self.cin {
                let plane = &x.data()[(n * self.cin + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let r = (ci * k + ky) * k + kx;
                        let dst = &mut cols[base + r * ho * wo..][..ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[oy * wo + ox] = plane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], dims: [usize; 4], ho: usize, wo: usize) -> Tensor {
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (h, w) = (dims[2], dims[3]);
        let rows = self.patch_len();
        let mut dx = Tensor::zeros(dims);
        for n in 0..dims[0] {
            let base = n * rows * ho * wo;
            for ci in 0..self.cin {
                let plane = &mut dx.data_mut()[(n * self.cin + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let r = (ci * k + ky) * k + kx;
                        let src = &dcols[base + r * ho * wo..][..ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Option<OpCache>)> {
        if x.c() != self.cin {
            return Err(invalid(format!("conv expects {} channels, got {}", self.cin, x.c())));
        }
        let in_dims = x.dims();
        let (ho, wo) = self.out_size(x.h(), x.w());
        let cols = if self.is_pointwise() { x.into_data() } else { self.im2col(&x, ho, wo) };
        let rows = self.patch_len();
        let mut y = Tensor::zeros([in_dims[0], self.cout, ho, wo]);
        let plane = ho * wo;
        for n in 0..in_dims[0] {
            let out = &mut y.data_mut()[n * self.cout * plane..][..self.cout * plane];
            for (co, chunk) in out.chunks_exact_mut(plane).enumerate() {
                chunk.fill(self.bias[co]);
            }
            gemm(self.cout, rows, plane, &self.weight, false, &cols[n * rows * plane..], false, out, true);
        }
        let cache = match mode {
            Mode::Train => Some(OpCache::Conv { cols, in_dims }),
            Mode::Infer => None,
        };
        Ok((y, cache))
    }

    fn backward(&self, cols: &[f64], in_dims: [usize; 4], dy: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let rows = self.patch_len();
        let plane = dy.plane();
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.cout];
        let mut dcols = vec![0.0; in_dims[0] * rows * plane];
        for n in 0..in_dims[0] {
            let g = &dy.data()[n * self.cout * plane..][..self.cout * plane];
            for (co, chunk) in g.chunks_exact(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
            let c = &cols[n * rows * plane..][..rows * plane];
            gemm(self.cout, plane, rows, g, false, c, true, &mut dw, true);
            gemm(rows, self.cout, plane, &self.weight, true, g, false, &mut dcols[n * rows * plane..], false);
        }
        let (ho, wo) = (dy.h(), dy.w());
        let dx = if self.is_pointwise() {
            Tensor::from_vec(in_dims, dcols).expect("pointwise columns match input")
        } else {
            self.col2im(&dcols, in_dims, ho, wo)
        };
        (dx, vec![dw, db])
    }
}

/// Per-channel 3×3 convolution, padding 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseConv {
    pub channels: usize,
    pub stride: usize,
    /// `channels × 9`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DepthwiseConv {
    pub fn new(channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        DepthwiseConv { channels, stride, weight: kaiming(rng, 9, channels * 9), bias: vec![0.0; channels] }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Option<OpCache>)> {
        if x.c() != self.channels {
            return Err(invalid(format!("depthwise conv expects {} channels, got {}", self.channels, x.c())));
        }
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.out_size(h, w);
        let s = self.stride;
        let mut y = Tensor::zeros([x.n(), self.channels, ho, wo]);
        for n in 0..x.n() {
            for c in 0..self.channels {
                let src = &x.data()[(n * self.channels + c) * h * w..][..h * w];
                let dst = &mut y.data_mut()[(n * self.channels + c) * ho * wo..][..ho * wo];
                let k = &self.weight[c * 9..c * 9 + 9];
                dst.fill(self.bias[c]);
                for oy in 0..ho {
                    let cy = (oy * s) as isize;
                    for ky in 0..3isize {
                        let iy = cy + ky - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..][..w];
                        let out = &mut dst[oy * wo..][..wo];
                        for kx in 0..3isize {
                            let wt = k[(ky * 3 + kx) as usize];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + kx - 1;
                                if ix >= 0 && ix < w as isize {
                                    *o += wt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let cache = match mode {
            Mode::Train => Some(OpCache::Depthwise { input: x }),
            Mode::Infer => None,
        };
        Ok((y, cache))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (dy.h(), dy.w());
        let s = self.stride;
        let mut dx = Tensor::zeros(x.dims());
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.channels];
        for n in 0..x.n() {
            for c in 0..self.channels {
                let idx = (n * self.channels + c) * h * w;
                let src = &x.data()[idx..][..h * w];
                let g = &dy.data()[(n * self.channels + c) * ho * wo..][..ho * wo];
                db[c] += g.iter().sum::<f64>();
                let k = &self.weight[c * 9..c * 9 + 9];
                let gx = &mut dx.data_mut()[idx..][..h * w];
                for oy in 0..ho {
                    let cy = (oy * s) as isize;
                    for ky in 0..3isize {
                        let iy = cy + ky - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..3isize {
                            let t = (ky * 3 + kx) as usize;
                            let mut acc = 0.0;
                            for ox in 0..wo {
                                let ix = (ox * s) as isize + kx - 1;
                                if ix >= 0 && ix < w as isize {
                                    let go = g[oy * wo + ox];
                                    acc += go * src[iy * w + ix as usize];
                                    gx[iy * w + ix as usize] += k[t] * go;
                                }
                            }
                            dw[c * 9 + t] += acc;
                        }
                    }
                }
            }
        }
        (dx, vec![dw, db])
    }
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    /// Unbiased batch variance, for the running estimate.
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn forward(&self, mut x: Tensor, mode: Mode) -> Result<(Tensor, Option<OpCache>)> {
        if x.c() != self.channels {
            return Err(invalid(format!("batch norm expects {} channels, got {}", self.channels, x.c())));
        }
        let (nb, c, plane) = (x.n(), self.channels, x.plane());
        match mode {
            Mode::Infer => {
                for n in 0..nb {
                    for ch in 0..c {
                        let scale = self.gamma[ch] / (self.running_var[ch] + BN_EPS).sqrt();
                        let shift = self.beta[ch] - self.running_mean[ch] * scale;
                        for v in &mut x.data_mut()[(n * c + ch) * plane..][..plane] {
                            *v = *v * scale + shift;
                        }
                    }
                }
                Ok((x, None))
            }
            Mode::Train => {
                let m = (nb * plane) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for n in 0..nb {
                    for ch in 0..c {
                        mean[ch] += x.data()[(n * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for n in 0..nb {
                    for ch in 0..c {
                        var[ch] += x.data()[(n * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + BN_EPS).sqrt()).collect();
                let unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
                let dims = x.dims();
                let mut xhat = x.into_data();
                let mut y = vec![0.0; xhat.len()];
                for n in 0..nb {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        for i in off..off + plane {
                            let h = (xhat[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            y[i] = self.gamma[ch] * h + self.beta[ch];
                        }
                    }
                }
                let cache = NormCache { xhat, inv_std, mean, var: unbiased };
                Ok((Tensor::from_vec(dims, y)?, Some(OpCache::Norm(cache))))
            }
        }
    }

    fn backward(&self, cache: &NormCache, dy: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let (nb, c, plane) = (dy.n(), self.channels, dy.plane());
        let m = (nb * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for n in 0..nb {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    dbeta[ch] += dy.data()[i];
                    dgamma[ch] += dy.data()[i] * cache.xhat[i];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.dims());
        for n in 0..nb {
            for ch in 0..c {
                let k = self.gamma[ch] * cache.inv_std[ch] / m;
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    dx.data_mut()[i] = k * (m * dy.data()[i] - dbeta[ch] - cache.xhat[i] * dgamma[ch]);
                }
            }
        }
        (dx, vec![dgamma, dbeta])
    }

    fn update_running(&mut self, cache: &NormCache) {
        for ch in 0..self.channels {
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.mean[ch];
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * cache.var[ch];
        }
    }
}

fn relu6_forward(mut x: Tensor, mode: Mode) -> (Tensor, Option<OpCache>) {
    let mut mask = match mode {
        Mode::Train => Vec::with_capacity(x.len()),
        Mode::Infer => Vec::new(),
    };
    for v in x.data_mut() {
        if mode == Mode::Train {
            mask.push(*v > 0.0 && *v < 6.0);
        }
        *v = v.clamp(0.0, 6.0);
    }
    let cache = match mode {
        Mode::Train => Some(OpCache::Relu6 { mask }),
        Mode::Infer => None,
    };
    (x, cache)
}

/// One element of a layer sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Conv(Conv2d),
    Depthwise(DepthwiseConv),
    Norm(BatchNorm),
    Relu6,
}

#[derive(Clone, Debug)]
pub(crate) enum OpCache {
    Conv { cols: Vec<f64>, in_dims: [usize; 4] },
    Depthwise { input: Tensor },
    Norm(NormCache),
    Relu6 { mask: Vec<bool> },
}

impl Op {
    pub(crate) fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Option<OpCache>)> {
        match self {
            Op::Conv(l) => l.forward(x, mode),
            Op::Depthwise(l) => l.forward(x, mode),
            Op::Norm(l) => l.forward(x, mode),
            Op::Relu6 => Ok(relu6_forward(x, mode)),
        }
    }

    pub(crate) fn backward(&self, cache: &OpCache, dy: Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        match (self, cache) {
            (Op::Conv(l), OpCache::Conv { cols, in_dims }) => Ok(l.backward(cols, *in_dims, &dy)),
            (Op::Depthwise(l), OpCache::Depthwise { input }) => Ok(l.backward(input, &dy)),
            (Op::Norm(l), OpCache::Norm(c)) => Ok(l.backward(c, &dy)),
            (Op::Relu6, OpCache::Relu6 { mask }) => {
                let mut dx = dy;
                for (g, &keep) in dx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *g = 0.0;
                    }
                }
                Ok((dx, Vec::new()))
            }
            _ => Err(Error::InvalidState("layer cache does not match layer type".into())),
        }
    }

    pub(crate) fn update_running(&mut self, cache: &OpCache) {
        if let (Op::Norm(l), OpCache::Norm(c)) = (self, cache) {
            l.update_running(c);
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Op::Conv(l) => vec![&l.weight, &l.bias],
            Op::Depthwise(l) => vec![&l.weight, &l.bias],
            Op::Norm(l) => vec![&l.gamma, &l.beta],
            Op::Relu6 => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Op::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Op::Depthwise(l) => vec![&mut l.weight, &mut l.bias],
            Op::Norm(l) => vec![&mut l.gamma, &mut l.beta],
            Op::Relu6 => Vec::new(),
        }
    }

    pub fn out_channels(&self, cin: usize) -> usize {
        match self {
            Op::Conv(l) => l.cout,
            _ => cin,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Op::Conv(l) => l.out_size(h, w),
            Op::Depthwise(l) => l.out_size(h, w),
            _ => (h, w),
        }
    }
}

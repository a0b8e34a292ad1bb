//! Truncated MobileNet-V2 patch encoder: a strided stem convolution, a
//! stack of inverted-residual blocks, a 1×1 projection to the feature width
//! and global average pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, DepthwiseConv, Op, OpCache};
use super::tensor::Tensor;
use super::Mode;
use crate::error::{invalid, Error, Result};

/// One row of the block table: expansion factor `t`, output channels `c`,
/// repeats `n` and first-repeat stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

const fn block(expansion: usize, channels: usize, repeats: usize, stride: usize) -> BlockSpec {
    BlockSpec { expansion, channels, repeats, stride }
}

/// The seven inverted-residual rows of the reference encoder.
pub const FULL_BLOCKS: [BlockSpec; 7] = [
    block(1, 16, 1, 1),
    block(6, 24, 2, 2),
    block(6, 32, 3, 2),
    block(6, 64, 4, 2),
    block(6, 96, 3, 1),
    block(6, 160, 3, 2),
    block(6, 320, 1, 1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_h: usize,
    pub in_w: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    pub feature_dim: usize,
    /// Batch normalization after every convolution; off gives a purely
    /// deterministic function of the input for gradient checks.
    pub norm: bool,
}

impl EncoderConfig {
    /// The full reference encoder: 1×1 stride-2 stem to 32 channels, the
    /// seven block rows, a 1×1 projection to 64 features.
    pub fn full(in_h: usize, in_w: usize) -> Self {
        EncoderConfig {
            in_h,
            in_w,
            stem_channels: 32,
            stem_kernel: 1,
            stem_stride: 2,
            blocks: FULL_BLOCKS.to_vec(),
            feature_dim: 64,
            norm: true,
        }
    }

    /// Two small blocks and 8 features, for fast property tests.
    pub fn tiny(in_h: usize, in_w: usize) -> Self {
        EncoderConfig {
            in_h,
            in_w,
            stem_channels: 4,
            stem_kernel: 1,
            stem_stride: 2,
            blocks: vec![block(1, 4, 1, 1), block(2, 6, 1, 2)],
            feature_dim: 8,
            norm: true,
        }
    }

    /// The reference layer table with every channel count multiplied by
    /// `width` (rounded to a multiple of 4, at least 4) and repeats capped at
    /// `max_repeats`. The feature width stays 64.
    pub fn full_scaled(in_h: usize, in_w: usize, width: f64, max_repeats: usize) -> Self {
        let scale = |c: usize| (((c as f64 * width) / 4.0).round() as usize).max(1) * 4;
        let mut cfg = Self::full(in_h, in_w);
        cfg.stem_channels = scale(cfg.stem_channels);
        for b in &mut cfg.blocks {
            b.channels = scale(b.channels);
            b.repeats = b.repeats.min(max_repeats.max(1));
        }
        cfg
    }

    pub fn without_norm(mut self) -> Self {
        self.norm = false;
        self
    }

    /// Spatial size entering each block row, then entering the final
    /// projection.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let down = |v: usize, s: usize| (v - 1) / s + 1;
        let pad = self.stem_kernel / 2;
        let mut hw = (
            (self.in_h + 2 * pad - self.stem_kernel) / self.stem_stride + 1,
            (self.in_w + 2 * pad - self.stem_kernel) / self.stem_stride + 1,
        );
        let mut out = vec![hw];
        for b in &self.blocks {
            hw = (down(hw.0, b.stride), down(hw.1, b.stride));
            out.push(hw);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_h == 0 || self.in_w == 0 || self.stem_channels == 0 || self.feature_dim == 0 {
            return Err(invalid("encoder sizes must be positive"));
        }
        if self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(invalid("stem kernel must be odd and stride positive"));
        }
        if self.blocks.iter().any(|b| b.expansion == 0 || b.channels == 0 || b.repeats == 0 || b.stride == 0) {
            return Err(invalid("block specs must be positive"));
        }
        Ok(())
    }
}

/// Named encoder families, resolved against a patch size at training time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncoderPreset {
    Full,
    Scaled { width: f64, max_repeats: usize },
    Tiny,
}

impl EncoderPreset {
    pub fn build(&self, in_h: usize, in_w: usize) -> EncoderConfig {
        match *self {
            EncoderPreset::Full => EncoderConfig::full(in_h, in_w),
            EncoderPreset::Scaled { width, max_repeats } => {
                EncoderConfig::full_scaled(in_h, in_w, width, max_repeats)
            }
            EncoderPreset::Tiny => EncoderConfig::tiny(in_h, in_w),
        }
    }
}

/// Accepts `full`, `tiny` or `scaled:<width>:<max_repeats>`.
impl std::str::FromStr for EncoderPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EncoderPreset::Full),
            "tiny" => Ok(EncoderPreset::Tiny),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                let bad = || invalid(format!("unknown encoder preset {s:?}"));
                if parts.len() != 3 || parts[0] != "scaled" {
                    return Err(bad());
                }
                let width: f64 = parts[1].parse().map_err(|_| bad())?;
                let max_repeats: usize = parts[2].parse().map_err(|_| bad())?;
                if !(width > 0.0 && width.is_finite()) || max_repeats == 0 {
                    return Err(bad());
                }
                Ok(EncoderPreset::Scaled { width, max_repeats })
            }
        }
    }
}

impl std::fmt::Display for EncoderPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderPreset::Full => write!(f, "full"),
            EncoderPreset::Tiny => write!(f, "tiny"),
            EncoderPreset::Scaled { width, max_repeats } => write!(f, "scaled:{width}:{max_repeats}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ops: Vec<Op>,
    residual: bool,
}

/// Encoder parameters plus normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Vec<Op>,
    blocks: Vec<Block>,
    tail: Vec<Op>,
}

/// Everything the backward pass needs from one training-mode forward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    stem: Vec<OpCache>,
    blocks: Vec<Vec<OpCache>>,
    tail: Vec<OpCache>,
    pooled_dims: [usize; 4],
}

fn conv_unit(ops: &mut Vec<Op>, conv: Op, channels: usize, norm: bool, relu: bool) {
    ops.push(conv);
    if norm {
        ops.push(Op::Norm(BatchNorm::new(channels)));
    }
    if relu {
        ops.push(Op::Relu6);
    }
}

fn run(ops: &[Op], mut x: Tensor, mode: Mode, caches: &mut Vec<OpCache>) -> Result<Tensor> {
    for op in ops {
        let (y, cache) = op.forward(x, mode)?;
        if let Some(c) = cache {
            caches.push(c);
        }
        x = y;
    }
    Ok(x)
}

/// Backpropagates through `ops`; returns the input gradient and the
/// parameter gradients in forward order.
fn unrun(ops: &[Op], caches: &[OpCache], mut dy: Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
    if caches.len() != ops.len() {
        return Err(Error::InvalidState("missing forward cache".into()));
    }
    let mut per_op = Vec::with_capacity(ops.len());
    for (op, cache) in ops.iter().zip(caches).rev() {
        let (dx, g) = op.backward(cache, dy)?;
        per_op.push(g);
        dy = dx;
    }
    Ok((dy, per_op.into_iter().rev().flatten().collect()))
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let norm = config.norm;
        let mut stem = Vec::new();
        let c0 = config.stem_channels;
        conv_unit(&mut stem, Op::Conv(Conv2d::new(1, c0, config.stem_kernel, config.stem_stride, rng)), c0, norm, true);

        let mut blocks = Vec::new();
        let mut cin = c0;
        for spec in &config.blocks {
            for r in 0..spec.repeats {
                let stride = if r == 0 { spec.stride } else { 1 };
                let hidden = cin * spec.expansion;
                let mut ops = Vec::new();
                if spec.expansion != 1 {
                    conv_unit(&mut ops, Op::Conv(Conv2d::new(cin, hidden, 1, 1, rng)), hidden, norm, true);
                }
                conv_unit(&mut ops, Op::Depthwise(DepthwiseConv::new(hidden, stride, rng)), hidden, norm, true);
                conv_unit(&mut ops, Op::Conv(Conv2d::new(hidden, spec.channels, 1, 1, rng)), spec.channels, norm, false);
                blocks.push(Block { ops, residual: stride == 1 && cin == spec.channels });
                cin = spec.channels;
            }
        }
        let mut tail = Vec::new();
        let f = config.feature_dim;
        conv_unit(&mut tail, Op::Conv(Conv2d::new(cin, f, 1, 1, rng)), f, norm, true);
        Ok(Encoder { config, stem, blocks, tail })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn ops(&self) -> impl Iterator<Item = &Op> {
        self.stem.iter().chain(self.blocks.iter().flat_map(|b| b.ops.iter())).chain(self.tail.iter())
    }

    fn ops_mut(&mut self) -> impl Iterator<Item = &mut Op> {
        self.stem
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.ops.iter_mut()))
            .chain(self.tail.iter_mut())
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.ops().flat_map(Op::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.ops_mut().flat_map(Op::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Number of inverted-residual blocks after expanding repeats.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Encodes a `N × 1 × in_h × in_w` batch into `N × feature_dim × 1 × 1`.
    pub fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Option<EncoderCache>)> {
        let want = [x.n(), 1, self.config.in_h, self.config.in_w];
        if x.dims() != want {
            return Err(invalid(format!("encoder input {:?}, expected {:?}", x.dims(), want)));
        }
        let mut cache = EncoderCache { stem: Vec::new(), blocks: Vec::new(), tail: Vec::new(), pooled_dims: [0; 4] };
        let mut h = run(&self.stem, x, mode, &mut cache.stem)?;
        for b in &self.blocks {
            let mut caches = Vec::new();
            let skip = if b.residual { Some(h.clone()) } else { None };
            let mut y = run(&b.ops, h, mode, &mut caches)?;
            if let Some(s) = skip {
                y.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
            }
            cache.blocks.push(caches);
            h = y;
        }
        let h = run(&self.tail, h, mode, &mut cache.tail)?;
        cache.pooled_dims = h.dims();
        let plane = h.plane() as f64;
        let pooled: Vec<f64> = h.data().chunks_exact(h.plane()).map(|c| c.iter().sum::<f64>() / plane).collect();
        let out = Tensor::from_vec([h.n(), h.c(), 1, 1], pooled)?;
        Ok((out, (mode == Mode::Train).then_some(cache)))
    }

    /// Parameter gradients (in [`Encoder::params`] order) for an upstream
    /// gradient on the pooled features.
    pub fn backward(&self, cache: &EncoderCache, dfeat: &Tensor) -> Result<Vec<Vec<f64>>> {
        let dims = cache.pooled_dims;
        if dfeat.dims() != [dims[0], dims[1], 1, 1] {
            return Err(invalid(format!("feature gradient {:?} does not match {:?}", dfeat.dims(), dims)));
        }
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::InvalidState("missing forward cache".into()));
        }
        let plane = dims[2] * dims[3];
        let mut dy = Tensor::zeros(dims);
        for (chunk, g) in dy.data_mut().chunks_exact_mut(plane).zip(dfeat.data()) {
            chunk.fill(g / plane as f64);
        }
        let (mut dy, tail_g) = unrun(&self.tail, &cache.tail, dy)?;
        let mut block_g = Vec::with_capacity(self.blocks.len());
        for (b, caches) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (mut dx, g) = unrun(&b.ops, caches, dy.clone())?;
            if b.residual {
                dx.data_mut().iter_mut().zip(dy.data()).for_each(|(a, b)| *a += b);
            }
            block_g.push(g);
            dy = dx;
        }
        let (_, stem_g) = unrun(&self.stem, &cache.stem, dy)?;
        Ok(stem_g.into_iter().chain(block_g.into_iter().rev().flatten()).chain(tail_g).collect())
    }

    /// Folds the batch statistics of a training pass into the running
    /// normalization estimates.
    pub fn update_running_stats(&mut self, cache: &EncoderCache) {
        let caches = cache.stem.iter().chain(cache.blocks.iter().flatten()).chain(cache.tail.iter());
        let ops = self.ops_mut().filter(|op| !matches!(op, Op::Relu6 | Op::Conv(_) | Op::Depthwise(_)));
        // norm caches appear in the same order as norm ops
        let norm_caches = caches.filter(|c| matches!(c, OpCache::Norm(_)));
        for (op, c) in ops.zip(norm_caches) {
            op.update_running(c);
        }
    }
}

//! Dynamic attention detection head.
//!
//! The pyramid is resized to the median level and stacked into an
//! `N x L x C x H x W` tensor (the `L x S x C` view with `S = H * W`). Each
//! block applies level attention, then deformable spatial attention, then
//! channel attention; the result is split back into per-level prediction maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Per-level feature maps on a tape, each `N x C x H_i x W_i`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(tape: &Tape, levels: Vec<Var>, strides: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.len() != strides.len() {
            return Err(Error::invalid(format!(
                "pyramid needs one stride per level ({} levels, {} strides)",
                levels.len(),
                strides.len()
            )));
        }
        let first = tape.shape(levels[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape(format!("pyramid levels must be NCHW, got {first:?}")));
        }
        for (i, &v) in levels.iter().enumerate().skip(1) {
            let s = tape.shape(v);
            if s.len() != 4 || s[0] != first[0] {
                return Err(Error::shape(format!("level {i} has shape {s:?}, level 0 {first:?}")));
            }
            if s[1] != first[1] {
                return Err(Error::shape(format!(
                    "level {i} has {} channels, level 0 has {}",
                    s[1], first[1]
                )));
            }
            if strides[i] <= strides[i - 1] {
                return Err(Error::invalid(format!("strides must increase: {strides:?}")));
            }
            let prev = tape.shape(levels[i - 1]);
            let ratio = strides[i] / strides[i - 1];
            if strides[i] % strides[i - 1] != 0
                || s[2] != prev[2].div_ceil(ratio)
                || s[3] != prev[3].div_ceil(ratio)
            {
                return Err(Error::shape(format!(
                    "level {i} size {}x{} does not follow stride {} from {}x{} at stride {}",
                    s[2], s[3], strides[i], prev[2], prev[3], strides[i - 1]
                )));
            }
        }
        Ok(FeaturePyramid { levels, strides })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.levels[0])[1]
    }

    pub fn sizes(&self, tape: &Tape) -> Vec<(usize, usize)> {
        self.levels.iter().map(|&v| (tape.shape(v)[2], tape.shape(v)[3])).collect()
    }
}

/// All levels resampled to one grid and stacked along a level axis.
#[derive(Clone, Debug)]
pub struct UnifiedFeature {
    /// `N x L x C x H x W`.
    pub tensor: Var,
    pub reference_level: usize,
    /// Native `(H_i, W_i)` of every level, for re-splitting.
    pub level_sizes: Vec<(usize, usize)>,
}

impl UnifiedFeature {
    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Reference height and width.
    pub fn grid(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.tensor);
        (s[3], s[4])
    }

    /// Spatial extent `S = H * W` of the reference grid.
    pub fn s(&self, tape: &Tape) -> usize {
        let (h, w) = self.grid(tape);
        h * w
    }

    fn with_tensor(&self, tensor: Var) -> Self {
        UnifiedFeature { tensor, ..self.clone() }
    }
}

/// Median level index; the lower median for an even count.
pub fn reference_level(num_levels: usize) -> usize {
    (num_levels - 1) / 2
}

pub fn unify(tape: &mut Tape, pyramid: &FeaturePyramid) -> Result<UnifiedFeature> {
    if pyramid.num_levels() < 2 {
        return Err(Error::invalid("unify needs at least two pyramid levels"));
    }
    let c = pyramid.channels(tape);
    for (i, &v) in pyramid.levels.iter().enumerate() {
        if tape.shape(v)[1] != c {
            return Err(Error::shape(format!("level {i} has {} channels, expected {c}", tape.shape(v)[1])));
        }
    }
    let sizes = pyramid.sizes(tape);
    let reference = reference_level(sizes.len());
    let (h, w) = sizes[reference];
    let n = tape.shape(pyramid.levels[0])[0];
    let mut stacked = Vec::with_capacity(sizes.len());
    for &v in &pyramid.levels {
        let r = tape.resize_nearest(v, h, w)?;
        stacked.push(tape.reshape(r, &[n, 1, c, h, w])?);
    }
    let tensor = tape.concat(&stacked, 1)?;
    Ok(UnifiedFeature { tensor, reference_level: reference, level_sizes: sizes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DAHeadConfig {
    pub num_levels: usize,
    pub channels: usize,
    pub num_blocks: usize,
    /// Sparse sample count `K = k * k` for odd `k`.
    pub samples: usize,
    /// Channel reduction of the task-attention bottleneck.
    pub reduction: usize,
    pub num_classes: usize,
}

impl Default for DAHeadConfig {
    fn default() -> Self {
        DAHeadConfig { num_levels: 3, channels: 16, num_blocks: 2, samples: 9, reduction: 4, num_classes: 2 }
    }
}

impl DAHeadConfig {
    pub fn kernel_side(&self) -> usize {
        (self.samples as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_side();
        if k * k != self.samples || k % 2 == 0 {
            return Err(Error::invalid(format!("sample count {} is not the square of an odd number", self.samples)));
        }
        if self.num_blocks == 0 {
            return Err(Error::invalid("DAHead needs at least one block"));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::invalid(format!(
                "channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.num_levels < 2 {
            return Err(Error::invalid("DAHead needs at least two levels"));
        }
        Ok(())
    }
}

/// Level-wise gating: pooled level means, a 1x1 convolution across the level
/// axis, ReLU, hard sigmoid.
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    /// `L_in x L_out`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ScaleAttention {
    pub fn new(store: &mut ParamStore, name: &str, levels: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), Init::Normal(0.01).tensor(&[levels, levels], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::full(vec![levels], 1.0));
        ScaleAttention { weight, bias }
    }

    /// Per-image, per-level weights in `[0, 1]`, shape `N x L`.
    pub fn level_weights(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<Var> {
        let pooled = ctx.tape.mean(f.tensor, &[2, 3, 4])?;
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let z = ctx.tape.linear(pooled, w, b)?;
        let z = ctx.tape.relu(z);
        Ok(ctx.tape.hard_sigmoid(z))
    }

    pub fn forward(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<UnifiedFeature> {
        let weights = self.level_weights(ctx, f)?;
        let s = ctx.tape.shape(f.tensor).to_vec();
        let weights = ctx.tape.reshape(weights, &[s[0], s[1], 1, 1, 1])?;
        let out = ctx.tape.mul(f.tensor, weights)?;
        Ok(f.with_tensor(out))
    }
}

/// Deformable sparse sampling with learned offsets and modulation, averaged
/// over levels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    /// Reads the reference slice; emits `2K` offsets then `K` modulation logits.
    pub offset_conv: Conv2d,
    /// One `C_out x (C * K)` kernel per level.
    pub kernels: Vec<ParamId>,
    pub kernel_side: usize,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DAHeadConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.samples;
        let c = cfg.channels;
        let offset_conv =
            Conv2d::with_init(store, &format!("{name}.offset"), c, 3 * k, 3, 1, Init::Zeros, rng);
        let kernels = (0..cfg.num_levels)
            .map(|l| {
                let init = Init::Kaiming { fan_in: c * k, gain: 1.0 };
                store.add(format!("{name}.kernel{l}"), init.tensor(&[c, c * k], rng))
            })
            .collect();
        SpatialAttention { offset_conv, kernels, kernel_side: cfg.kernel_side() }
    }

    pub fn samples(&self) -> usize {
        self.kernel_side * self.kernel_side
    }

    /// Sampling positions `p + p_k + dp_k` (`N x K*H*W x 2`, `(y, x)` pairs)
    /// and modulation `sigmoid(m_k)` (`N x 1 x K*H*W`).
    pub fn sampling(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(f.tensor).to_vec();
        let (n, c, h, w) = (s[0], s[2], s[3], s[4]);
        let k = self.samples();
        let reference = ctx.tape.narrow(f.tensor, 1, f.reference_level, 1)?;
        let reference = ctx.tape.reshape(reference, &[n, c, h, w])?;
        let pred = self.offset_conv.forward(ctx, reference)?;

        let offsets = ctx.tape.narrow(pred, 1, 0, 2 * k)?;
        let offsets = ctx.tape.reshape(offsets, &[n, k, 2, h, w])?;
        let offsets = ctx.tape.permute(offsets, &[0, 1, 3, 4, 2])?;
        let offsets = ctx.tape.reshape(offsets, &[n, k * h * w, 2])?;
        let r = (self.kernel_side / 2) as isize;
        let mut grid = Vec::with_capacity(k * h * w * 2);
        for tap in 0..k {
            let (dy, dx) = ((tap / self.kernel_side) as isize - r, (tap % self.kernel_side) as isize - r);
            for y in 0..h {
                for x in 0..w {
                    grid.push((y as isize + dy) as f64);
                    grid.push((x as isize + dx) as f64);
                }
            }
        }
        let grid = ctx.tape.constant(Tensor::new(vec![k * h * w, 2], grid)?);
        let points = ctx.tape.add(offsets, grid)?;

        let logits = ctx.tape.narrow(pred, 1, 2 * k, k)?;
        let mask = ctx.tape.sigmoid(logits);
        let mask = ctx.tape.reshape(mask, &[n, 1, k * h * w])?;
        Ok((points, mask))
    }

    pub fn forward(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<UnifiedFeature> {
        let s = ctx.tape.shape(f.tensor).to_vec();
        let (n, levels, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if levels != self.kernels.len() {
            return Err(Error::shape(format!("spatial attention built for {} levels, got {levels}", self.kernels.len())));
        }
        let k = self.samples();
        let hw = h * w;
        let (points, mask) = self.sampling(ctx, f)?;
        let mut acc: Option<Var> = None;
        for (l, &kernel) in self.kernels.iter().enumerate() {
            let level = ctx.tape.narrow(f.tensor, 1, l, 1)?;
            let level = ctx.tape.reshape(level, &[n, c, h, w])?;
            let sampled = ctx.tape.bilinear_sample(level, points)?;
            let sampled = ctx.tape.mul(sampled, mask)?;
            // rows ordered (channel, tap), columns (image, position)
            let cols = ctx.tape.reshape(sampled, &[n, c * k, hw])?;
            let cols = ctx.tape.permute(cols, &[1, 0, 2])?;
            let cols = ctx.tape.reshape(cols, &[c * k, n * hw])?;
            let kv = ctx.param(kernel);
            let y = ctx.tape.matmul(kv, cols)?;
            acc = Some(match acc {
                None => y,
                Some(a) => ctx.tape.add(a, y)?,
            });
        }
        let sum = acc.expect("at least one level");
        let c_out = ctx.tape.shape(sum)[0];
        let mean = ctx.tape.scale(sum, 1.0 / levels as f64);
        let mean = ctx.tape.reshape(mean, &[c_out, n, hw])?;
        let mean = ctx.tape.permute(mean, &[1, 0, 2])?;
        let mean = ctx.tape.reshape(mean, &[n, 1, c_out, h, w])?;
        // the cross-level aggregate is shared by every level slot
        let copies = vec![mean; levels];
        let out = ctx.tape.concat(&copies, 1)?;
        Ok(f.with_tensor(out))
    }
}

/// Channel-wise dynamic piecewise-linear activation
/// `max(a1 * F + b1, a2 * F + b2)` with coefficients predicted from the
/// globally pooled feature.
#[derive(Clone, Debug)]
pub struct TaskAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl TaskAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DAHeadConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let hidden = c / cfg.reduction;
        let fc1 = Linear::new(store, &format!("{name}.fc1"), c, hidden, Init::Kaiming { fan_in: c, gain: 1.0 }, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, 4 * c, Init::Zeros, rng);
        TaskAttention { fc1, fc2, channels: c }
    }

    /// `(a1, a2, b1, b2)` per channel, shape `N x 4 x C`.
    pub fn coefficients(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<Var> {
        let s = ctx.tape.shape(f.tensor).to_vec();
        let (n, c) = (s[0], s[2]);
        let theta = ctx.tape.mean(f.tensor, &[1, 3, 4])?;
        let hdn = self.fc1.forward(ctx, theta)?;
        let hdn = ctx.tape.relu(hdn);
        let u = self.fc2.forward(ctx, hdn)?;
        let u = ctx.tape.hard_sigmoid(u);
        let u = ctx.tape.scale(u, 2.0);
        let u = ctx.tape.add_scalar(u, -1.0);
        let shift = ctx.tape.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 0.0, 0.0, 0.0])?);
        let u = ctx.tape.reshape(u, &[n, 4, c])?;
        ctx.tape.add(u, shift)
    }

    pub fn forward(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<UnifiedFeature> {
        let s = ctx.tape.shape(f.tensor).to_vec();
        let (n, c) = (s[0], s[2]);
        if c != self.channels {
            return Err(Error::shape(format!("task attention built for {} channels, got {c}", self.channels)));
        }
        let coeffs = self.coefficients(ctx, f)?;
        let mut parts = Vec::with_capacity(4);
        for j in 0..4 {
            let p = ctx.tape.narrow(coeffs, 1, j, 1)?;
            parts.push(ctx.tape.reshape(p, &[n, 1, c, 1, 1])?);
        }
        let (a1, a2, b1, b2) = (parts[0], parts[1], parts[2], parts[3]);
        let first = ctx.tape.mul(f.tensor, a1)?;
        let first = ctx.tape.add(first, b1)?;
        let second = ctx.tape.mul(f.tensor, a2)?;
        let second = ctx.tape.add(second, b2)?;
        let out = ctx.tape.maximum(first, second)?;
        Ok(f.with_tensor(out))
    }
}

#[derive(Clone, Debug)]
pub struct DAHeadBlock {
    pub scale: ScaleAttention,
    pub spatial: SpatialAttention,
    pub task: TaskAttention,
}

impl DAHeadBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DAHeadConfig, rng: &mut impl Rng) -> Self {
        DAHeadBlock {
            scale: ScaleAttention::new(store, &format!("{name}.scale"), cfg.num_levels, rng),
            spatial: SpatialAttention::new(store, &format!("{name}.spatial"), cfg, rng),
            task: TaskAttention::new(store, &format!("{name}.task"), cfg, rng),
        }
    }

    /// Level, then spatial, then channel attention.
    pub fn forward(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<UnifiedFeature> {
        let f = self.scale.forward(ctx, f)?;
        let f = self.spatial.forward(ctx, &f)?;
        self.task.forward(ctx, &f)
    }
}

#[derive(Clone, Debug)]
pub struct DAHead {
    pub config: DAHeadConfig,
    pub blocks: Vec<DAHeadBlock>,
    /// Per-level 1x1 prediction convolutions, `C -> 4 + num_classes`.
    pub predictors: Vec<Conv2d>,
}

impl DAHead {
    pub fn new(store: &mut ParamStore, name: &str, config: DAHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks)
            .map(|b| DAHeadBlock::new(store, &format!("{name}.block{b}"), &config, rng))
            .collect();
        let predictors = (0..config.num_levels)
            .map(|l| {
                let init = Init::Normal(0.01);
                Conv2d::with_init(store, &format!("{name}.pred{l}"), config.channels, 4 + config.num_classes, 1, 1, init, rng)
            })
            .collect();
        Ok(DAHead { config, blocks, predictors })
    }

    pub fn blocks_forward(&self, ctx: &mut Ctx, f: &UnifiedFeature) -> Result<UnifiedFeature> {
        let mut f = f.clone();
        for block in &self.blocks {
            f = block.forward(ctx, &f)?;
        }
        Ok(f)
    }

    /// Resizes each level slice back to its native size and adds the native
    /// pyramid level.
    pub fn merge_levels(&self, ctx: &mut Ctx, f: &UnifiedFeature, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        let s = ctx.tape.shape(f.tensor).to_vec();
        let (n, c, h, w) = (s[0], s[2], s[3], s[4]);
        let mut out = Vec::with_capacity(f.num_levels());
        for (l, &(lh, lw)) in f.level_sizes.iter().enumerate() {
            let slice = ctx.tape.narrow(f.tensor, 1, l, 1)?;
            let slice = ctx.tape.reshape(slice, &[n, c, h, w])?;
            let native = ctx.tape.resize_nearest(slice, lh, lw)?;
            out.push(ctx.tape.add(native, pyramid.levels[l])?);
        }
        Ok(out)
    }

    /// [`DAHead::merge_levels`] followed by each level's prediction convolution.
    pub fn split_heads(&self, ctx: &mut Ctx, f: &UnifiedFeature, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        let merged = self.merge_levels(ctx, f, pyramid)?;
        merged.into_iter().zip(&self.predictors).map(|(m, p)| p.forward(ctx, m)).collect()
    }

    /// Attended per-level features at native resolution, before prediction.
    pub fn refine(&self, ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        let unified = unify(ctx.tape, pyramid)?;
        let f = self.blocks_forward(ctx, &unified)?;
        self.merge_levels(ctx, &f, pyramid)
    }

    pub fn forward(&self, ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        let unified = unify(ctx.tape, pyramid)?;
        let f = self.blocks_forward(ctx, &unified)?;
        self.split_heads(ctx, &f, pyramid)
    }
}

//! Tiny anchor-free detector: residual conv backbone, lateral projections,
//! a selectable neck and a selectable head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::NUM_CLASSES;
use crate::bwfpn::{FusionTopology, Neck, NeckKind};
use crate::dahead::{DAHead, DAHeadConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, Init, ParamStore};
use crate::tensor::Var;

/// Initial class bias, `-ln((1 - p) / p)` for a prior of 0.01.
pub const CLASS_PRIOR_BIAS: f64 = -4.595;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Plain,
    DaHead,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(HeadKind::Plain),
            "dahead" => Ok(HeadKind::DaHead),
            other => Err(Error::invalid(format!("unknown head `{other}` (expected plain or dahead)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Plain => "plain",
            HeadKind::DaHead => "dahead",
        })
    }
}

/// Nonlinearity of the backbone and plain head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, tape: &mut crate::tensor::Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::invalid(format!("unknown activation `{other}` (expected relu or silu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem_width: usize,
    /// One entry per stride-2 stage after the stem.
    pub stage_widths: Vec<usize>,
    /// Pyramid levels taken from the last stages.
    pub num_levels: usize,
    /// Channel width of the neck and head.
    pub channels: usize,
    pub neck: NeckKind,
    pub neck_layers: usize,
    pub head: HeadKind,
    pub head_blocks: usize,
    pub head_samples: usize,
    pub head_reduction: usize,
    pub num_classes: usize,
    pub sppf: bool,
    /// Group-norm groups after backbone, lateral and plain-head convs; 0 disables.
    pub norm_groups: usize,
    pub activation: Activation,
    /// Seed of parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            stem_width: 16,
            stage_widths: vec![24, 32, 48, 64],
            num_levels: 3,
            channels: 32,
            neck: NeckKind::Bwfpn,
            neck_layers: 1,
            head: HeadKind::DaHead,
            head_blocks: 2,
            head_samples: 9,
            head_reduction: 4,
            num_classes: NUM_CLASSES,
            sppf: false,
            norm_groups: 4,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn strides(&self) -> Vec<usize> {
        let stages = self.stage_widths.len();
        (stages - self.num_levels..stages).map(|i| 1 << (i + 2)).collect()
    }

    pub fn outputs_per_cell(&self) -> usize {
        4 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 || self.num_levels > self.stage_widths.len() {
            return Err(Error::invalid(format!(
                "num_levels {} must be between 2 and the number of stages ({})",
                self.num_levels,
                self.stage_widths.len()
            )));
        }
        let largest = *self.strides().last().expect("at least two levels");
        if self.input_size == 0 || self.input_size % largest != 0 {
            return Err(Error::invalid(format!(
                "input_size {} must be a positive multiple of the largest stride {largest}",
                self.input_size
            )));
        }
        if self.channels == 0 || self.stem_width == 0 || self.stage_widths.contains(&0) || self.num_classes == 0 {
            return Err(Error::invalid("widths and class count must be positive"));
        }
        if self.norm_groups > 0 {
            let widths = [self.stem_width, self.channels].into_iter().chain(self.stage_widths.iter().copied());
            if let Some(w) = widths.into_iter().find(|w| w % self.norm_groups != 0) {
                return Err(Error::invalid(format!("width {w} is not divisible by norm_groups {}", self.norm_groups)));
            }
        }
        if self.head == HeadKind::DaHead {
            self.dahead_config().validate()?;
        }
        Ok(())
    }

    pub fn dahead_config(&self) -> DAHeadConfig {
        DAHeadConfig {
            num_levels: self.num_levels,
            channels: self.channels,
            num_blocks: self.head_blocks,
            samples: self.head_samples,
            reduction: self.head_reduction,
            num_classes: self.num_classes,
        }
    }
}

/// Convolution followed by an optional group norm.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: Option<GroupNorm>,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        gamma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::new(store, name, cin, cout, kernel, stride, rng);
        let norm = (groups > 0).then(|| GroupNorm::new(store, &format!("{name}.norm"), cout, groups, gamma));
        ConvNorm { conv, norm }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        match &self.norm {
            Some(n) => n.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// Stride-2 downsampling conv followed by one residual block
/// `act(x + conv(act(conv(x))))` whose residual branch starts at zero
/// (zero norm scale, or a zero conv when normalisation is off).
#[derive(Clone, Debug)]
pub struct Stage {
    pub act: Activation,
    pub down: ConvNorm,
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
}

impl Stage {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let down = ConvNorm::new(store, &format!("{name}.down"), cin, cout, 3, 2, groups, 1.0, rng);
        let conv1 = ConvNorm::new(store, &format!("{name}.conv1"), cout, cout, 3, 1, groups, 1.0, rng);
        let conv2 = if groups > 0 {
            ConvNorm::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, groups, 0.0, rng)
        } else {
            let conv = Conv2d::with_init(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::Zeros, rng);
            ConvNorm { conv, norm: None }
        };
        Stage { act, down, conv1, conv2 }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let d = self.down.forward(ctx, x)?;
        let d = self.act.apply(ctx.tape, d);
        let h = self.conv1.forward(ctx, d)?;
        let h = self.act.apply(ctx.tape, h);
        let h = self.conv2.forward(ctx, h)?;
        let y = ctx.tape.add(d, h)?;
        Ok(self.act.apply(ctx.tape, y))
    }
}

/// Three chained 5x5 stride-1 max pools, concatenated with the input and
/// fused back by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub act: Activation,
    pub fuse: Conv2d,
}

impl Sppf {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let p1 = ctx.tape.max_pool2d(x, 5, 1, 2)?;
        let p2 = ctx.tape.max_pool2d(p1, 5, 1, 2)?;
        let p3 = ctx.tape.max_pool2d(p2, 5, 1, 2)?;
        let cat = ctx.tape.concat(&[x, p1, p2, p3], 1)?;
        let y = self.fuse.forward(ctx, cat)?;
        Ok(self.act.apply(ctx.tape, y))
    }
}

/// Prediction layers after the neck. Both kinds end in the same per-level
/// tower and 1x1 predictor; the DAHead adds its attention blocks in front.
#[derive(Clone, Debug)]
pub enum Head {
    Plain(Vec<Conv2d>),
    DaHead(DAHead),
}

impl Head {
    pub fn predictors(&self) -> Vec<&Conv2d> {
        match self {
            Head::Plain(p) => p.iter().collect(),
            Head::DaHead(h) => h.predictors.iter().collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub stem: ConvNorm,
    pub stages: Vec<Stage>,
    pub sppf: Option<Sppf>,
    pub laterals: Vec<ConvNorm>,
    pub neck: Neck,
    /// Per-level `3x3 conv + norm + activation` before the predictor.
    pub towers: Vec<ConvNorm>,
    pub head: Head,
}

impl Detector {
    /// Builds the model, registering every parameter in `store`.
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let groups = config.norm_groups;
        let stem = ConvNorm::new(store, "stem", 3, config.stem_width, 3, 2, groups, 1.0, &mut rng);
        let mut stages = Vec::new();
        let mut cin = config.stem_width;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            stages.push(Stage::new(store, &format!("stage{}", i + 1), cin, w, groups, config.activation, &mut rng));
            cin = w;
        }
        let sppf = config.sppf.then(|| Sppf { act: config.activation, fuse: Conv2d::new(store, "sppf.fuse", 4 * cin, cin, 1, 1, &mut rng) });
        let first = config.stage_widths.len() - config.num_levels;
        let laterals = (0..config.num_levels)
            .map(|l| {
                let w = config.stage_widths[first + l];
                ConvNorm::new(store, &format!("lateral{l}"), w, config.channels, 1, 1, groups, 1.0, &mut rng)
            })
            .collect();
        let topology = FusionTopology::build(config.neck, config.num_levels, config.neck_layers)?;
        let neck = Neck::new(store, "neck", topology, config.channels, &mut rng);
        let c = config.channels;
        let out = config.outputs_per_cell();
        let towers = (0..config.num_levels)
            .map(|l| ConvNorm::new(store, &format!("head.l{l}.conv"), c, c, 3, 1, groups, 1.0, &mut rng))
            .collect();
        let head = match config.head {
            HeadKind::Plain => Head::Plain(
                (0..config.num_levels)
                    .map(|l| {
                        Conv2d::with_init(store, &format!("head.l{l}.pred"), c, out, 1, 1, Init::Normal(0.01), &mut rng)
                    })
                    .collect(),
            ),
            HeadKind::DaHead => Head::DaHead(DAHead::new(store, "head", config.dahead_config(), &mut rng)?),
        };
        for p in head.predictors() {
            store.get_mut(p.bias).data_mut()[4..].iter_mut().for_each(|b| *b = CLASS_PRIOR_BIAS);
        }
        Ok(Detector { config, stem, stages, sppf, laterals, neck, towers, head })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.config.strides()
    }

    /// Backbone pyramid after the lateral projections.
    pub fn features(&self, ctx: &mut Ctx, images: Var) -> Result<FeaturePyramid> {
        let shape = ctx.tape.shape(images).to_vec();
        let size = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::shape(format!("expected images [N, 3, {size}, {size}], got {shape:?}")));
        }
        let x = self.stem.forward(ctx, images)?;
        let mut x = self.config.activation.apply(ctx.tape, x);
        let mut outs = Vec::new();
        for stage in &self.stages {
            x = stage.forward(ctx, x)?;
            outs.push(x);
        }
        let mut levels: Vec<Var> = outs.split_off(outs.len() - self.config.num_levels);
        if let Some(sppf) = &self.sppf {
            let last = levels.len() - 1;
            levels[last] = sppf.forward(ctx, levels[last])?;
        }
        let projected =
            levels.iter().zip(&self.laterals).map(|(&v, lat)| lat.forward(ctx, v)).collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(ctx.tape, projected, self.strides())
    }

    /// Per-level prediction maps `[N, 4 + classes, H_l, W_l]`: four raw
    /// distance channels, then class logits.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Vec<Var>> {
        let pyramid = self.features(ctx, images)?;
        let fused = self.neck.forward(ctx, &pyramid)?;
        let features = match &self.head {
            Head::Plain(_) => fused.levels.clone(),
            Head::DaHead(head) => head.refine(ctx, &fused)?,
        };
        features
            .into_iter()
            .zip(&self.towers)
            .zip(self.head.predictors())
            .map(|((f, tower), predict)| {
                let h = tower.forward(ctx, f)?;
                let h = self.config.activation.apply(ctx.tape, h);
                predict.forward(ctx, h)
            })
            .collect()
    }
}

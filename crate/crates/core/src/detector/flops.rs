//! Analytic floating-point operation count of one forward pass on one image.
//!
//! Convention: a multiply-accumulate is 2 FLOPs, so a convolution costs
//! `2 H' W' C_out C_in K^2` and a linear layer `2 D E`; biases are folded into
//! the accumulate. Elementwise work (activations, residual adds, fusion terms,
//! attention products) is 1 FLOP per output element, a group norm 4 per
//! element (mean, variance, normalise, affine), a max pool `K^2` per output
//! element, and a bilinear sample 8 per value (four weighted neighbours).
//! Resizing and reshaping are free.

use std::fmt::Write as _;

use super::model::{ConvNorm, Detector, Head, ModelConfig};
use crate::error::Result;
use crate::nn::{Conv2d, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> u64 {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.flops).sum()
    }

    fn push(&mut self, name: impl Into<String>, flops: u64) {
        self.layers.push(LayerFlops { name: name.into(), flops });
    }

    /// `layer,flops` lines with a trailing total.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,flops\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{}", l.name, l.flops);
        }
        let _ = writeln!(s, "total,{}", self.total());
        s
    }
}

pub fn conv_flops(conv: &Conv2d, h: usize, w: usize) -> u64 {
    2 * conv.macs(h, w)
}

/// Convolution plus its optional group norm.
pub fn conv_norm_flops(cn: &ConvNorm, h: usize, w: usize) -> u64 {
    let (oh, ow) = cn.conv.output_size(h, w);
    let norm = if cn.norm.is_some() { 4 * (oh * ow * cn.conv.out_channels) as u64 } else { 0 };
    conv_flops(&cn.conv, h, w) + norm
}

pub fn linear_flops(d: usize, e: usize) -> u64 {
    2 * (d * e) as u64
}

/// Counts FLOPs of the model described by `config`.
pub fn count_flops(config: &ModelConfig) -> Result<FlopReport> {
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, config.clone())?;
    Ok(model_flops(&model))
}

pub fn model_flops(model: &Detector) -> FlopReport {
    let cfg = &model.config;
    let mut r = FlopReport::default();
    let size = cfg.input_size;
    let (mut h, mut w) = (size, size);

    let conv_act = |r: &mut FlopReport, name: &str, cn: &ConvNorm, h: usize, w: usize| -> (usize, usize) {
        let (oh, ow) = cn.conv.output_size(h, w);
        r.push(name, conv_norm_flops(cn, h, w) + (oh * ow * cn.conv.out_channels) as u64);
        (oh, ow)
    };

    (h, w) = conv_act(&mut r, "backbone.stem", &model.stem, h, w);
    let mut sizes = Vec::new();
    for (i, st) in model.stages.iter().enumerate() {
        (h, w) = conv_act(&mut r, &format!("backbone.stage{}.down", i + 1), &st.down, h, w);
        conv_act(&mut r, &format!("backbone.stage{}.conv1", i + 1), &st.conv1, h, w);
        let elems = (h * w * st.conv2.conv.out_channels) as u64;
        r.push(format!("backbone.stage{}.conv2", i + 1), conv_norm_flops(&st.conv2, h, w) + 2 * elems);
        sizes.push((h, w, st.conv2.conv.out_channels));
    }
    let levels: Vec<(usize, usize, usize)> = sizes[sizes.len() - cfg.num_levels..].to_vec();
    if let Some(sppf) = &model.sppf {
        let (lh, lw, c) = *levels.last().expect("levels");
        let pools = 3 * 25 * (lh * lw * c) as u64;
        let fuse = conv_flops(&sppf.fuse, lh, lw) + (lh * lw * c) as u64;
        r.push("backbone.sppf", pools + fuse);
    }
    for (l, (lat, &(lh, lw, _))) in model.laterals.iter().zip(&levels).enumerate() {
        r.push(format!("lateral{l}"), conv_norm_flops(lat, lh, lw));
    }
    let grid: Vec<(usize, usize)> = levels.iter().map(|&(a, b, _)| (a, b)).collect();
    for (name, f) in model.neck.flops_by_node(&grid) {
        r.push(name, f);
    }

    let c = cfg.channels;
    if let Head::DaHead(head) = &model.head {
        let dc = &head.config;
        let nl = dc.num_levels;
        let reference = crate::dahead::reference_level(nl);
        let (gh, gw) = grid[reference];
        let s = (gh * gw) as u64;
        let (l, c64, k) = (nl as u64, c as u64, dc.samples as u64);
        let unified = l * s * c64;
        let hidden = c / dc.reduction;
        for (b, block) in head.blocks.iter().enumerate() {
            let scale = unified + linear_flops(nl, nl) + 2 * l + unified;
            r.push(format!("head.block{b}.scale"), scale);
            let offsets = conv_flops(&block.spatial.offset_conv, gh, gw) + k * s;
            let sample = l * k * s * c64 * 8 + l * k * s * c64;
            let mix = l * 2 * c64 * c64 * k * s + l * s * c64;
            r.push(format!("head.block{b}.spatial"), offsets + sample + mix);
            let task =
                unified + linear_flops(c, hidden) + hidden as u64 + linear_flops(hidden, 4 * c) + 2 * 4 * c64 + 5 * unified;
            r.push(format!("head.block{b}.task"), task);
        }
        for (lv, &(lh, lw)) in grid.iter().enumerate() {
            r.push(format!("head.l{lv}.merge"), (lh * lw * c) as u64);
        }
    }
    for (l, ((tower, p), &(lh, lw))) in model.towers.iter().zip(model.head.predictors()).zip(&grid).enumerate() {
        r.push(format!("head.l{l}.conv"), conv_norm_flops(tower, lh, lw) + (lh * lw * c) as u64);
        r.push(format!("head.l{l}.pred"), conv_flops(p, lh, lw));
    }
    r
}

//! Finite-difference verification of every differentiable operation and
//! composed module.
//!
//! Each registered check draws seeded random inputs and compares reverse-mode
//! gradients with central differences. Points whose inputs lie within
//! [`KINK_MARGIN`] of a derivative discontinuity are redrawn.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bwfpn::{FusionTopology, Neck, NeckKind};
use crate::dahead::{unify, DAHead, DAHeadBlock, DAHeadConfig, FeaturePyramid, ScaleAttention, SpatialAttention, TaskAttention};
use crate::detector::train::{detection_loss, detection_loss_with};
use crate::detector::{Detector, GroundTruth, LevelGrid, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{box_loss, box_loss_with, BBox, BoxVars, LossState, LossVariant};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::{GradCheck, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: usize = 5;
pub const KINK_MARGIN: f64 = 1e-4;
/// Draws allowed per check before it is reported as lacking kink-free points.
pub const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    Tensor,
    Dahead,
    Bwfpn,
    Loss,
    Detector,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Tensor, Suite::Dahead, Suite::Bwfpn, Suite::Loss, Suite::Detector];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Dahead => "dahead",
            Suite::Bwfpn => "bwfpn",
            Suite::Loss => "loss",
            Suite::Detector => "detector",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `all` or one suite name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    One(Suite),
}

impl Selection {
    pub fn includes(self, s: Suite) -> bool {
        self == Selection::All || self == Selection::One(s)
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(Selection::All);
        }
        Suite::ALL.into_iter().find(|x| x.name() == s).map(Selection::One).ok_or_else(|| {
            Error::invalid(format!("unknown module `{s}` (expected all, tensor, dahead, bwfpn, loss or detector)"))
        })
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Inputs and scalar objective of one check point.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub objective: Objective,
    /// Per-input cap on checked coordinates.
    pub max_coords: Option<usize>,
}

impl Case {
    fn new(inputs: Vec<Tensor>, objective: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Case { inputs, objective: Box::new(objective), max_coords: None }
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    build: Builder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: &'static str,
    /// Kink-free points compared.
    pub points: usize,
    /// Points redrawn for lying near a kink.
    pub redrawn: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{:<9} {:<22} points {} redrawn {:>3} coords {:>5} max_rel {:.3e} max_abs {:.3e}  {}",
            self.suite.name(),
            self.name,
            self.points,
            self.redrawn,
            self.coords,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    random(shape, r).map(|v| 0.5 + v.abs())
}

/// `sum(w * y)` with fixed random weights, so every output coordinate
/// contributes a distinct amount.
fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

macro_rules! unary_case {
    ($r:expr, $shape:expr, $gen:ident, $op:expr) => {{
        let x = $gen(&$shape, $r);
        let w = random(&$shape, $r);
        Ok(Case::new(vec![x], move |t, v| {
            let y = $op(t, v[0])?;
            weighted(t, y, &w)
        }))
    }};
}

macro_rules! binary_case {
    ($r:expr, $a:expr, $b:expr, $out:expr, $op:ident) => {{
        let a = random(&$a, $r);
        let b = random(&$b, $r).map(|v| if v.abs() < 0.2 { v + 0.5 * v.signum() + 0.1 } else { v });
        let w = random(&$out, $r);
        Ok(Case::new(vec![a, b], move |t, v| {
            let y = t.$op(v[0], v[1])?;
            weighted(t, y, &w)
        }))
    }};
}

fn ok(v: Var) -> Result<Var> {
    Ok(v)
}

fn tensor_checks() -> Vec<Check> {
    let c = |name, build: Builder| Check { suite: Suite::Tensor, name, build };
    vec![
        c("add", |r| binary_case!(r, [2, 3], [3], [2, 3], add)),
        c("sub", |r| binary_case!(r, [2, 1, 3], [4, 1], [2, 4, 3], sub)),
        c("mul", |r| binary_case!(r, [3, 4], [3, 1], [3, 4], mul)),
        c("div", |r| binary_case!(r, [2, 3], [2, 3], [2, 3], div)),
        c("maximum", |r| binary_case!(r, [3, 4], [4], [3, 4], maximum)),
        c("minimum", |r| binary_case!(r, [3, 4], [3, 4], [3, 4], minimum)),
        c("scale", |r| unary_case!(r, [5], random, |t: &mut Tape, x| ok(t.scale(x, -1.7)))),
        c("add_scalar", |r| unary_case!(r, [5], random, |t: &mut Tape, x| ok(t.add_scalar(x, 0.3)))),
        c("neg", |r| unary_case!(r, [5], random, |t: &mut Tape, x| ok(t.neg(x)))),
        c("exp", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.exp(x)))),
        c("ln", |r| unary_case!(r, [2, 3], positive, |t: &mut Tape, x| ok(t.ln(x)))),
        c("sqrt", |r| unary_case!(r, [2, 3], positive, |t: &mut Tape, x| ok(t.sqrt(x)))),
        c("square", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.square(x)))),
        c("abs", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.abs(x)))),
        c("atan", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.atan(x)))),
        c("relu", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.relu(x)))),
        c("silu", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.silu(x)))),
        c("sigmoid", |r| unary_case!(r, [2, 3], random, |t: &mut Tape, x| ok(t.sigmoid(x)))),
        c("hard_sigmoid", |r| {
            let x = random(&[2, 3], r).map(|v| 4.0 * v);
            let w = random(&[2, 3], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.hard_sigmoid(v[0]);
                weighted(t, y, &w)
            }))
        }),
        c("powf", |r| unary_case!(r, [2, 3], positive, |t: &mut Tape, x| ok(t.powf(x, 1.7)))),
        c("bce_with_logits", |r| {
            let x = random(&[2, 3], r).map(|v| 3.0 * v);
            let target = random(&[2, 3], r).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.bce_with_logits(v[0], &target)?;
                Ok(t.sum_all(y))
            }))
        }),
        c("sum", |r| unary_case!(r, [2, 3, 4], random, |t: &mut Tape, x| {
            let s = t.sum(x, &[1])?;
            t.reshape(s, &[2, 3, 4].map(|d| if d == 3 { 1 } else { d }))
                .and_then(|s| t.concat(&[s, s, s], 1))
        })),
        c("mean", |r| unary_case!(r, [2, 3, 4], random, |t: &mut Tape, x| {
            let m = t.mean(x, &[0, 2])?;
            let m = t.reshape(m, &[1, 3, 1])?;
            let sq = t.square(x);
            t.mul(sq, m)
        })),
        c("sum_all", |r| unary_case!(r, [3, 2], random, |t: &mut Tape, x| {
            let sq = t.square(x);
            let s = t.sum_all(sq);
            t.mul(x, s)
        })),
        c("mean_all", |r| unary_case!(r, [3, 2], random, |t: &mut Tape, x| {
            let sq = t.square(x);
            let s = t.mean_all(sq);
            t.mul(x, s)
        })),
        c("reshape", |r| {
            let x = random(&[2, 6], r);
            let w = random(&[3, 4], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                let y = t.square(y);
                weighted(t, y, &w)
            }))
        }),
        c("permute", |r| {
            let x = random(&[2, 3, 4], r);
            let w = random(&[4, 2, 3], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                let y = t.square(y);
                weighted(t, y, &w)
            }))
        }),
        c("narrow", |r| {
            let x = random(&[3, 5], r);
            let w = random(&[3, 2], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.narrow(v[0], 1, 2, 2)?;
                let y = t.square(y);
                weighted(t, y, &w)
            }))
        }),
        c("concat", |r| {
            let (a, b) = (random(&[2, 2, 3], r), random(&[2, 1, 3], r));
            let w = random(&[2, 3, 3], r);
            Ok(Case::new(vec![a, b], move |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                let y = t.square(y);
                weighted(t, y, &w)
            }))
        }),
        c("gather", |r| {
            let x = random(&[2, 3], r);
            let w = random(&[4], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.gather(v[0], &[5, 0, 5, 2])?;
                let y = t.square(y);
                weighted(t, y, &w)
            }))
        }),
        c("resize_nearest", |r| {
            let x = random(&[1, 2, 2, 3], r);
            let w = random(&[1, 2, 5, 4], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.resize_nearest(v[0], 5, 4)?;
                weighted(t, y, &w)
            }))
        }),
        c("matmul", |r| {
            let (a, b) = (random(&[3, 4], r), random(&[4, 2], r));
            let w = random(&[3, 2], r);
            Ok(Case::new(vec![a, b], move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, &w)
            }))
        }),
        c("linear", |r| {
            let (x, wt, b) = (random(&[3, 4], r), random(&[4, 2], r), random(&[2], r));
            let w = random(&[3, 2], r);
            Ok(Case::new(vec![x, wt, b], move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted(t, y, &w)
            }))
        }),
        c("conv2d", |r| {
            let (x, k, b) = (random(&[2, 2, 5, 5], r), random(&[3, 2, 3, 3], r), random(&[3], r));
            let w = random(&[2, 3, 5, 5], r);
            Ok(Case::new(vec![x, k, b], move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted(t, y, &w)
            }))
        }),
        c("conv2d_stride2", |r| {
            let (x, k) = (random(&[1, 2, 6, 6], r), random(&[2, 2, 3, 3], r));
            let w = random(&[1, 2, 3, 3], r);
            Ok(Case::new(vec![x, k], move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                weighted(t, y, &w)
            }))
        }),
        c("max_pool2d", |r| {
            let x = random(&[1, 2, 5, 5], r);
            let w = random(&[1, 2, 5, 5], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.max_pool2d(v[0], 3, 1, 1)?;
                weighted(t, y, &w)
            }))
        }),
        c("bilinear_sample", |r| {
            let x = random(&[1, 2, 4, 4], r);
            let pts = random(&[1, 6, 2], r).map(|v| 1.5 + 2.2 * v);
            let w = random(&[1, 2, 6], r);
            Ok(Case::new(vec![x, pts], move |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                weighted(t, y, &w)
            }))
        }),
        c("group_norm", |r| {
            let x = random(&[2, 4, 3, 3], r);
            let w = random(&[2, 4, 3, 3], r);
            Ok(Case::new(vec![x], move |t, v| {
                let y = t.group_norm(v[0], 2, 1e-5)?;
                weighted(t, y, &w)
            }))
        }),
    ]
}

fn bind(ctx: &mut Ctx, ids: &[ParamId], vars: &[Var]) {
    for (&id, &v) in ids.iter().zip(vars) {
        ctx.bind(id, v);
    }
}

fn randomize(store: &mut ParamStore, scale: f64, r: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, random(&shape, r).map(|v| scale * v)).expect("same shape");
    }
}

fn params(store: &ParamStore) -> (Vec<ParamId>, Vec<Tensor>) {
    store.iter().map(|(id, _, t)| (id, t.clone())).unzip()
}

const DA_SIZES: [usize; 2] = [4, 2];

fn da_config() -> DAHeadConfig {
    DAHeadConfig { num_levels: 2, channels: 4, num_blocks: 1, samples: 9, reduction: 2, num_classes: 2 }
}

/// Toy two-level pyramid followed by `f`, which maps the unified feature to
/// a scalar. Inputs are the pyramid levels then every parameter.
fn da_case(
    r: &mut ChaCha8Rng,
    store: ParamStore,
    f: impl Fn(&mut Ctx, &FeaturePyramid) -> Result<Var> + 'static,
) -> Result<Case> {
    let c = da_config().channels;
    let (ids, values) = params(&store);
    let mut inputs: Vec<Tensor> = DA_SIZES.iter().map(|&s| random(&[1, c, s, s], r)).collect();
    inputs.extend(values);
    Ok(Case::new(inputs, move |tape, vars| {
        let p = FeaturePyramid::new(tape, vars[..2].to_vec(), vec![8, 16])?;
        let mut ctx = Ctx::eval(tape, &store);
        bind(&mut ctx, &ids, &vars[2..]);
        f(&mut ctx, &p)
    }))
}

fn unified_objective(ctx: &mut Ctx, t: Var, w: &Tensor) -> Result<Var> {
    let sq = ctx.tape.square(t);
    weighted(ctx.tape, sq, w)
}

fn dahead_checks() -> Vec<Check> {
    let c = |name, build: Builder| Check { suite: Suite::Dahead, name, build };
    vec![
        c("scale_attention", |r| {
            let mut store = ParamStore::new();
            let m = ScaleAttention::new(&mut store, "s", 2, r);
            randomize(&mut store, 1.0, r);
            let w = random(&[1, 2, 4, 4, 4], r);
            da_case(r, store, move |ctx, p| {
                let u = unify(ctx.tape, p)?;
                let out = m.forward(ctx, &u)?;
                unified_objective(ctx, out.tensor, &w)
            })
        }),
        c("spatial_attention", |r| {
            let mut store = ParamStore::new();
            let m = SpatialAttention::new(&mut store, "p", &da_config(), r);
            randomize(&mut store, 0.4, r);
            let w = random(&[1, 2, 4, 4, 4], r);
            da_case(r, store, move |ctx, p| {
                let u = unify(ctx.tape, p)?;
                let out = m.forward(ctx, &u)?;
                unified_objective(ctx, out.tensor, &w)
            })
        }),
        c("task_attention", |r| {
            let mut store = ParamStore::new();
            let m = TaskAttention::new(&mut store, "t", &da_config(), r);
            randomize(&mut store, 1.0, r);
            let w = random(&[1, 2, 4, 4, 4], r);
            da_case(r, store, move |ctx, p| {
                let u = unify(ctx.tape, p)?;
                let out = m.forward(ctx, &u)?;
                unified_objective(ctx, out.tensor, &w)
            })
        }),
        c("block", |r| {
            let mut store = ParamStore::new();
            let m = DAHeadBlock::new(&mut store, "b", &da_config(), r);
            randomize(&mut store, 0.5, r);
            let w = random(&[1, 2, 4, 4, 4], r);
            da_case(r, store, move |ctx, p| {
                let u = unify(ctx.tape, p)?;
                let out = m.forward(ctx, &u)?;
                unified_objective(ctx, out.tensor, &w)
            })
        }),
        c("head", |r| {
            let mut store = ParamStore::new();
            let m = DAHead::new(&mut store, "h", DAHeadConfig { num_blocks: 2, ..da_config() }, r)?;
            randomize(&mut store, 0.5, r);
            let ws: Vec<Tensor> = DA_SIZES.iter().map(|&s| random(&[1, 6, s, s], r)).collect();
            da_case(r, store, move |ctx, p| {
                let maps = m.forward(ctx, p)?;
                let mut total = ctx.tape.scalar(0.0);
                for (&m, w) in maps.iter().zip(&ws) {
                    let s = weighted(ctx.tape, m, w)?;
                    total = ctx.tape.add(total, s)?;
                }
                Ok(total)
            })
        }),
    ]
}

fn neck_case(r: &mut ChaCha8Rng, kind: NeckKind, layers: usize) -> Result<Case> {
    let c = 2;
    let sizes = [8, 4, 2];
    let mut store = ParamStore::new();
    let neck = Neck::new(&mut store, "n", FusionTopology::build(kind, 3, layers)?, c, r);
    let (ids, mut values) = params(&store);
    for (id, v) in ids.iter().zip(values.iter_mut()) {
        if store.name(*id).ends_with(".w") {
            // fusion weights clear of the relu kink at zero
            *v = uniform(v.shape(), 0.2, 1.5, r);
        }
    }
    let ws: Vec<Tensor> = sizes.iter().map(|&s| random(&[1, c, s, s], r)).collect();
    let mut inputs: Vec<Tensor> = sizes.iter().map(|&s| random(&[1, c, s, s], r)).collect();
    inputs.extend(values);
    Ok(Case::new(inputs, move |tape, vars| {
        let p = FeaturePyramid::new(tape, vars[..3].to_vec(), vec![8, 16, 32])?;
        let mut ctx = Ctx::eval(tape, &store);
        bind(&mut ctx, &ids, &vars[3..]);
        let out = neck.forward(&mut ctx, &p)?;
        let mut total = ctx.tape.scalar(0.0);
        for (&l, w) in out.levels.iter().zip(&ws) {
            let sq = ctx.tape.square(l);
            let s = weighted(ctx.tape, sq, w)?;
            total = ctx.tape.add(total, s)?;
        }
        Ok(total)
    }))
}

fn bwfpn_checks() -> Vec<Check> {
    let c = |name, build: Builder| Check { suite: Suite::Bwfpn, name, build };
    vec![
        c("fusion_layer", |r| neck_case(r, NeckKind::Bwfpn, 1)),
        c("stacked_layers", |r| neck_case(r, NeckKind::Bwfpn, 2)),
        c("fpn_reference", |r| neck_case(r, NeckKind::Fpn, 1)),
        c("panet_reference", |r| neck_case(r, NeckKind::Panet, 1)),
    ]
}

fn split(tape: &mut Tape, x: Var, n: usize) -> Result<BoxVars> {
    let x = tape.reshape(x, &[4, n])?;
    let row = |tape: &mut Tape, i| -> Result<Var> {
        let r = tape.narrow(x, 0, i, 1)?;
        tape.reshape(r, &[n])
    };
    Ok(BoxVars { cx: row(tape, 0)?, cy: row(tape, 1)?, w: row(tape, 2)?, h: row(tape, 3)? })
}

fn loss_case(r: &mut ChaCha8Rng, variant: LossVariant) -> Result<Case> {
    let n = 3;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..n {
        let g = BBox::new(r.gen_range(10.0..50.0), r.gen_range(10.0..50.0), r.gen_range(4.0..20.0), r.gen_range(4.0..20.0))?;
        let p = BBox::new(
            g.cx + r.gen_range(-4.0..4.0),
            g.cy + r.gen_range(-4.0..4.0),
            g.w * r.gen_range(0.6..1.6),
            g.h * r.gen_range(0.6..1.6),
        )?;
        gts.push(g);
        preds.push(p);
    }
    let mut state = LossState::new(variant);
    state.running_mean = r.gen_range(0.3..0.9);
    let mut tape = Tape::new();
    let pv = BoxVars::from_boxes(&mut tape, &preds, false);
    let gv = BoxVars::from_boxes(&mut tape, &gts, false);
    let held = box_loss(&mut tape, &pv, &gv, &state)?.detached;
    let flat = |bs: &[BBox]| {
        let mut v = Vec::with_capacity(4 * bs.len());
        for f in [|b: &BBox| b.cx, |b: &BBox| b.cy, |b: &BBox| b.w, |b: &BBox| b.h] {
            v.extend(bs.iter().map(f));
        }
        Tensor::from_vec(v)
    };
    let gt = flat(&gts);
    Ok(Case::new(vec![flat(&preds)], move |tape, v| {
        let pv = split(tape, v[0], n)?;
        let g = tape.constant(gt.clone());
        let gv = split(tape, g, n)?;
        let l = box_loss_with(tape, &pv, &gv, &state, Some(&held))?;
        Ok(tape.sum_all(l.per_box))
    }))
}

fn loss_checks() -> Vec<Check> {
    let c = |name, build: Builder| Check { suite: Suite::Loss, name, build };
    vec![
        c("iou", |r| loss_case(r, LossVariant::Iou)),
        c("giou", |r| loss_case(r, LossVariant::Giou)),
        c("diou", |r| loss_case(r, LossVariant::Diou)),
        c("ciou", |r| loss_case(r, LossVariant::Ciou)),
        c("eiou", |r| loss_case(r, LossVariant::Eiou)),
        c("siou", |r| loss_case(r, LossVariant::Siou)),
        c("wiou1", |r| loss_case(r, LossVariant::Wiou1)),
        c("wiou2", |r| loss_case(r, LossVariant::Wiou2)),
        c("wiou3", |r| loss_case(r, LossVariant::Wiou3)),
    ]
}

/// Tiny detector used by the full-pipeline check: 8x8 input, two levels.
pub fn tiny_pipeline_config() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        stem_width: 4,
        stage_widths: vec![4, 4],
        num_levels: 2,
        channels: 4,
        head_blocks: 1,
        head_samples: 1,
        head_reduction: 2,
        ..ModelConfig::default()
    }
}

fn pipeline_case(r: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = tiny_pipeline_config();
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, ModelConfig { init_seed: r.gen(), ..cfg })?;
    let (ids, mut values) = params(&store);
    for (id, v) in ids.iter().zip(values.iter_mut()) {
        let name = store.name(*id);
        // zero-initialised tensors would hide their input gradients
        if name.ends_with(".w") {
            *v = uniform(v.shape(), 0.2, 1.5, r);
        } else if name.ends_with(".gamma") {
            *v = uniform(v.shape(), 0.5, 1.5, r);
        } else if v.data().iter().all(|&x| x == 0.0) {
            *v = uniform(v.shape(), -0.5, 0.5, r);
        }
    }
    let image = random(&[1, 3, 8, 8], r);
    let labels = vec![vec![
        GroundTruth { class: 0, bbox: BBox::new(r.gen_range(2.0..6.0), r.gen_range(2.0..6.0), 3.0, 4.0)? },
        GroundTruth { class: 1, bbox: BBox::new(r.gen_range(2.5..5.5), r.gen_range(2.5..5.5), 7.0, 6.0)? },
    ]];
    let grids = LevelGrid::for_input(8, &model.strides());
    let train = TrainConfig::default();
    let mut state = LossState::new(LossVariant::Wiou3);
    state.running_mean = 0.5;

    // detached terms captured at the base point and held for the differences
    let held = {
        let mut tape = Tape::new();
        let mut base = store.clone();
        for (&id, v) in ids.iter().zip(&values) {
            base.set(id, v.clone())?;
        }
        let mut ctx = Ctx::eval(&mut tape, &base);
        let x = ctx.tape.constant(image.clone());
        let maps = model.forward(&mut ctx, x)?;
        detection_loss(ctx.tape, &maps, &labels, &grids, &state, &train)?.detached
    };

    let mut inputs = vec![image];
    inputs.extend(values);
    let mut case = Case::new(inputs, move |tape, vars| {
        let mut ctx = Ctx::eval(tape, &store);
        bind(&mut ctx, &ids, &vars[1..]);
        let maps = model.forward(&mut ctx, vars[0])?;
        Ok(detection_loss_with(ctx.tape, &maps, &labels, &grids, &state, &train, Some(&held))?.total)
    });
    case.max_coords = Some(6);
    Ok(case)
}

fn detector_checks() -> Vec<Check> {
    vec![Check { suite: Suite::Detector, name: "full_pipeline", build: pipeline_case }]
}

/// A sigmoid whose backward rule wrongly uses `s (1 + s)`; exists to prove
/// that the checker catches a broken rule.
fn corrupted_case(r: &mut ChaCha8Rng) -> Result<Case> {
    let x = random(&[2, 3], r);
    let w = random(&[2, 3], r);
    Ok(Case::new(vec![x], move |t, v| {
        let s = t.value(v[0]).map(|z| 1.0 / (1.0 + (-z).exp()));
        let y = t.custom(
            &[v[0]],
            s,
            Box::new(|_inputs, out, g| vec![out.data().iter().zip(g).map(|(s, g)| g * s * (1.0 + s)).collect()]),
        );
        weighted(t, y, &w)
    }))
}

/// Every registered check of the selection, in suite order.
pub fn registry(selection: Selection) -> Vec<Check> {
    let mut all = tensor_checks();
    all.extend(dahead_checks());
    all.extend(bwfpn_checks());
    all.extend(loss_checks());
    all.extend(detector_checks());
    all.retain(|c| selection.includes(c.suite));
    all
}

/// The deliberately broken rule, appended by the fault-injection switch.
pub fn fault_check() -> Check {
    Check { suite: Suite::Tensor, name: "corrupted_sigmoid", build: corrupted_case }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub eps: f64,
    pub tol: f64,
    pub points: usize,
    pub seed: u64,
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { eps: EPS, tol: TOL, points: POINTS, seed: 0, inject_fault: false }
    }
}

pub fn run_check(check: &Check, opts: &VerifyOptions) -> Result<CheckResult> {
    let name_seed = check.name.bytes().fold(check.suite as u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed ^ name_seed);
    let mut res = CheckResult {
        suite: check.suite,
        name: check.name,
        points: 0,
        redrawn: 0,
        coords: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        passed: true,
    };
    for attempt in 0..MAX_ATTEMPTS {
        if res.points == opts.points {
            break;
        }
        let case = (check.build)(&mut r)?;
        let mut gc = GradCheck::new(opts.eps, opts.tol).seed(attempt as u64);
        gc.max_coords = case.max_coords;
        let report = gc.run(&case.objective, &case.inputs)?;
        if report.kink_margin <= KINK_MARGIN {
            res.redrawn += 1;
            continue;
        }
        res.points += 1;
        res.coords += report.checked;
        res.max_rel_error = res.max_rel_error.max(report.max_rel_error);
        res.max_abs_error = res.max_abs_error.max(report.max_abs_error);
        res.passed &= report.passed();
    }
    res.passed &= res.points == opts.points;
    Ok(res)
}

/// Runs the selected checks, calling `on_result` as each finishes.
pub fn run(selection: Selection, opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut checks = registry(selection);
    if opts.inject_fault {
        checks.push(fault_check());
    }
    let mut out = Vec::with_capacity(checks.len());
    for c in &checks {
        let res = run_check(c, opts)?;
        on_result(&res);
        out.push(res);
    }
    Ok(out)
}

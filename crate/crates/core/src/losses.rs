//! IoU-family bounding-box regression losses, from plain IoU through the
//! three Wise-IoU variants, computed on the tape so they can be trained.
//!
//! All boxes are `(cx, cy, w, h)` in image units. Per-box functions take
//! [`BoxVars`], four `[P]` vectors, and return a `[P]` vector of losses.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossVariant {
    Iou,
    Giou,
    Diou,
    Ciou,
    Eiou,
    Siou,
    Wiou1,
    Wiou2,
    Wiou3,
}

impl LossVariant {
    pub const ALL: [LossVariant; 9] = [
        LossVariant::Iou,
        LossVariant::Giou,
        LossVariant::Diou,
        LossVariant::Ciou,
        LossVariant::Eiou,
        LossVariant::Siou,
        LossVariant::Wiou1,
        LossVariant::Wiou2,
        LossVariant::Wiou3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Iou => "iou",
            LossVariant::Giou => "giou",
            LossVariant::Diou => "diou",
            LossVariant::Ciou => "ciou",
            LossVariant::Eiou => "eiou",
            LossVariant::Siou => "siou",
            LossVariant::Wiou1 => "wiou1",
            LossVariant::Wiou2 => "wiou2",
            LossVariant::Wiou3 => "wiou3",
        }
    }

    /// Whether the loss is normalised by the running mean of `L_IoU`.
    pub fn uses_running_mean(self) -> bool {
        matches!(self, LossVariant::Wiou2 | LossVariant::Wiou3)
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown box loss `{s}`")))
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in centre/size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::invalid(format!("box needs finite centre and positive size, got ({cx}, {cy}, {w}, {h})")));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BBox { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }

    pub fn scaled(&self, k: f64) -> Self {
        BBox { cx: self.cx * k, cy: self.cy * k, w: self.w * k, h: self.h * k }
    }

    /// Plain IoU on `f64`, used by matching and NMS.
    pub fn iou(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        inter / (self.area() + other.area() - inter)
    }
}

/// A batch of `P` boxes on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl BoxVars {
    pub fn from_boxes(tape: &mut Tape, boxes: &[BBox], requires_grad: bool) -> Self {
        let mut col = |f: fn(&BBox) -> f64| tape.leaf(Tensor::from_vec(boxes.iter().map(f).collect()), requires_grad);
        BoxVars { cx: col(|b| b.cx), cy: col(|b| b.cy), w: col(|b| b.w), h: col(|b| b.h) }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.cx).numel()
    }

    pub fn is_empty(&self, tape: &Tape) -> bool {
        self.len(tape) == 0
    }

    /// `(x1, y1, x2, y2)` vectors.
    pub fn corners(&self, tape: &mut Tape) -> Result<[Var; 4]> {
        let hw = tape.scale(self.w, 0.5);
        let hh = tape.scale(self.h, 0.5);
        Ok([tape.sub(self.cx, hw)?, tape.sub(self.cy, hh)?, tape.add(self.cx, hw)?, tape.add(self.cy, hh)?])
    }
}

/// Overlap and enclosure quantities shared by every variant, each `[P]`.
#[derive(Clone, Copy, Debug)]
pub struct EnclosureGeometry {
    pub intersection: Var,
    pub union: Var,
    pub iou: Var,
    /// Width and height of the smallest box containing both.
    pub enclose_w: Var,
    pub enclose_h: Var,
    /// Squared distance between the centres.
    pub center_dist_sq: Var,
}

pub fn iou_geometry(tape: &mut Tape, pred: &BoxVars, gt: &BoxVars) -> Result<EnclosureGeometry> {
    let [px1, py1, px2, py2] = pred.corners(tape)?;
    let [gx1, gy1, gx2, gy2] = gt.corners(tape)?;
    let overlap = |tape: &mut Tape, a1, a2, b1, b2| -> Result<Var> {
        let hi = tape.minimum(a2, b2)?;
        let lo = tape.maximum(a1, b1)?;
        let d = tape.sub(hi, lo)?;
        Ok(tape.relu(d))
    };
    let iw = overlap(tape, px1, px2, gx1, gx2)?;
    let ih = overlap(tape, py1, py2, gy1, gy2)?;
    let intersection = tape.mul(iw, ih)?;
    let pa = tape.mul(pred.w, pred.h)?;
    let ga = tape.mul(gt.w, gt.h)?;
    let sum = tape.add(pa, ga)?;
    let union = tape.sub(sum, intersection)?;
    let iou = tape.div(intersection, union)?;

    let extent = |tape: &mut Tape, a1, a2, b1, b2| -> Result<Var> {
        let hi = tape.maximum(a2, b2)?;
        let lo = tape.minimum(a1, b1)?;
        tape.sub(hi, lo)
    };
    let enclose_w = extent(tape, px1, px2, gx1, gx2)?;
    let enclose_h = extent(tape, py1, py2, gy1, gy2)?;
    let dx = tape.sub(pred.cx, gt.cx)?;
    let dy = tape.sub(pred.cy, gt.cy)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let center_dist_sq = tape.add(dx2, dy2)?;
    Ok(EnclosureGeometry { intersection, union, iou, enclose_w, enclose_h, center_dist_sq })
}

/// Variant choice plus the running statistics and constants the Wise-IoU
/// variants need.
#[derive(Clone, Debug, PartialEq)]
pub struct LossState {
    pub variant: LossVariant,
    /// Exponentially smoothed mean of the detached `L_IoU`.
    pub running_mean: f64,
    pub momentum: f64,
    /// Focusing exponent of v2.
    pub gamma: f64,
    /// Gain shape constants of v3.
    pub alpha: f64,
    pub delta: f64,
    pub training: bool,
}

impl LossState {
    pub fn new(variant: LossVariant) -> Self {
        LossState { variant, running_mean: 1.0, momentum: 0.01, gamma: 0.5, alpha: 1.9, delta: 3.0, training: true }
    }

    pub fn eval(mut self) -> Self {
        self.training = false;
        self
    }

    /// `running_mean <- (1 - m) running_mean + m mean(batch)`.
    pub fn update_state(&mut self, detached_liou: &[f64]) -> Result<()> {
        if !self.training {
            return Err(Error::invalid("loss statistics cannot be updated in evaluation mode"));
        }
        if detached_liou.is_empty() {
            return Ok(());
        }
        let mean = detached_liou.iter().sum::<f64>() / detached_liou.len() as f64;
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean;
        Ok(())
    }
}

/// Gradient gain of the dynamic non-monotonic focusing mechanism.
pub fn wiou_gain(beta: f64, alpha: f64, delta: f64) -> f64 {
    beta / (delta * alpha.powf(beta - delta))
}

/// Values that enter a loss as gradient-free constants: the CIoU trade-off
/// weight, the Wise-IoU enclosure diagonal and the v2/v3 focusing factors.
/// Fields irrelevant to the chosen variant are empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetachedTerms {
    pub ciou_alpha: Vec<f64>,
    pub enclosure_diag_sq: Vec<f64>,
    pub focus: Vec<f64>,
}

/// Result of a batched loss evaluation.
#[derive(Clone, Debug)]
pub struct BoxLoss {
    /// Per-box loss, shape `[P]`.
    pub per_box: Var,
    /// Detached `1 - IoU` per box, the input to [`LossState::update_state`].
    pub liou: Vec<f64>,
    pub detached: DetachedTerms,
}

pub fn box_loss(tape: &mut Tape, pred: &BoxVars, gt: &BoxVars, state: &LossState) -> Result<BoxLoss> {
    box_loss_with(tape, pred, gt, state, None)
}

/// As [`box_loss`], optionally substituting previously captured detached
/// terms. Holding them fixed gives the function whose derivative backward
/// computes, which is what finite differences must be compared against.
pub fn box_loss_with(
    tape: &mut Tape,
    pred: &BoxVars,
    gt: &BoxVars,
    state: &LossState,
    held: Option<&DetachedTerms>,
) -> Result<BoxLoss> {
    let mut detached = DetachedTerms::default();
    let g = iou_geometry(tape, pred, gt)?;
    let one_minus_iou = {
        let n = tape.neg(g.iou);
        tape.add_scalar(n, 1.0)
    };
    let liou = tape.value(one_minus_iou).data().to_vec();
    let per_box = match state.variant {
        LossVariant::Iou => one_minus_iou,
        LossVariant::Giou => {
            let c = tape.mul(g.enclose_w, g.enclose_h)?;
            let gap = tape.sub(c, g.union)?;
            let penalty = tape.div(gap, c)?;
            tape.add(one_minus_iou, penalty)?
        }
        LossVariant::Diou => {
            let penalty = distance_penalty(tape, &g)?;
            tape.add(one_minus_iou, penalty)?
        }
        LossVariant::Ciou => {
            let penalty = distance_penalty(tape, &g)?;
            let base = tape.add(one_minus_iou, penalty)?;
            let v = aspect_consistency(tape, pred, gt)?;
            let denom = tape.add(v, one_minus_iou)?;
            let denom = tape.add_scalar(denom, 1e-7);
            let alpha = tape.div(v, denom)?;
            let alpha = hold(tape, alpha, held.map(|h| &h.ciou_alpha))?;
            detached.ciou_alpha = tape.value(alpha).data().to_vec();
            let av = tape.mul(alpha, v)?;
            tape.add(base, av)?
        }
        LossVariant::Eiou => {
            let penalty = distance_penalty(tape, &g)?;
            let base = tape.add(one_minus_iou, penalty)?;
            let side = |tape: &mut Tape, a: Var, b: Var, c: Var| -> Result<Var> {
                let d = tape.sub(a, b)?;
                let d2 = tape.square(d);
                let c2 = tape.square(c);
                tape.div(d2, c2)
            };
            let pw = side(tape, pred.w, gt.w, g.enclose_w)?;
            let ph = side(tape, pred.h, gt.h, g.enclose_h)?;
            let s = tape.add(base, pw)?;
            tape.add(s, ph)?
        }
        LossVariant::Siou => siou(tape, pred, gt, &g, one_minus_iou)?,
        LossVariant::Wiou1 | LossVariant::Wiou2 | LossVariant::Wiou3 => {
            let diag = enclosure_diag_sq(tape, &g)?;
            let diag = hold(tape, diag, held.map(|h| &h.enclosure_diag_sq))?;
            detached.enclosure_diag_sq = tape.value(diag).data().to_vec();
            let ratio = tape.div(g.center_dist_sq, diag)?;
            let r = tape.exp(ratio);
            let v1 = tape.mul(r, one_minus_iou)?;
            match state.variant {
                LossVariant::Wiou1 => v1,
                variant => {
                    if !(state.running_mean > 0.0) {
                        return Err(Error::invalid(format!("running mean must be positive, got {}", state.running_mean)));
                    }
                    let mut factors: Vec<f64> = liou
                        .iter()
                        .map(|&l| {
                            let beta = l.max(0.0) / state.running_mean;
                            if variant == LossVariant::Wiou2 {
                                beta.powf(state.gamma)
                            } else {
                                wiou_gain(beta, state.alpha, state.delta)
                            }
                        })
                        .collect();
                    if let Some(h) = held {
                        factors = h.focus.clone();
                    }
                    detached.focus = factors.clone();
                    let f = tape.constant(Tensor::new(tape.shape(v1).to_vec(), factors)?);
                    tape.mul(f, v1)?
                }
            }
        }
    };
    Ok(BoxLoss { per_box, liou, detached })
}

/// Detaches `x`, or replaces it by held values of the same shape.
fn hold(tape: &mut Tape, x: Var, held: Option<&Vec<f64>>) -> Result<Var> {
    match held {
        Some(v) => Ok(tape.constant(Tensor::new(tape.shape(x).to_vec(), v.clone())?)),
        None => Ok(tape.detach(x)),
    }
}

/// `rho^2 / (W_g^2 + H_g^2)`.
fn distance_penalty(tape: &mut Tape, g: &EnclosureGeometry) -> Result<Var> {
    let diag = enclosure_diag_sq(tape, g)?;
    tape.div(g.center_dist_sq, diag)
}

fn enclosure_diag_sq(tape: &mut Tape, g: &EnclosureGeometry) -> Result<Var> {
    let w2 = tape.square(g.enclose_w);
    let h2 = tape.square(g.enclose_h);
    tape.add(w2, h2)
}

/// `4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2`.
fn aspect_consistency(tape: &mut Tape, pred: &BoxVars, gt: &BoxVars) -> Result<Var> {
    let rp = tape.div(pred.w, pred.h)?;
    let rg = tape.div(gt.w, gt.h)?;
    let ap = tape.atan(rp);
    let ag = tape.atan(rg);
    let d = tape.sub(ag, ap)?;
    let d2 = tape.square(d);
    Ok(tape.scale(d2, 4.0 / (PI * PI)))
}

fn siou(tape: &mut Tape, pred: &BoxVars, gt: &BoxVars, g: &EnclosureGeometry, one_minus_iou: Var) -> Result<Var> {
    let dx = tape.sub(gt.cx, pred.cx)?;
    let dy = tape.sub(gt.cy, pred.cy)?;
    let rho = tape.add_scalar(g.center_dist_sq, 1e-14);
    let sigma = tape.sqrt(rho);
    let adx = tape.abs(dx);
    let ady = tape.abs(dy);
    let sin_x = tape.div(adx, sigma)?;
    let sin_y = tape.div(ady, sigma)?;
    // the smaller sine is the angle to the nearer axis, at most 45 degrees
    let s = tape.minimum(sin_y, sin_x)?;
    // angle cost cos(2 arcsin(s) - pi/2) = 2 s sqrt(1 - s^2)
    let s2 = tape.square(s);
    let c2 = tape.neg(s2);
    let c2 = tape.add_scalar(c2, 1.0);
    let c = tape.sqrt(c2);
    let sc = tape.mul(s, c)?;
    let angle = tape.scale(sc, 2.0);
    // distance cost sum_t (1 - exp(-(2 - angle) rho_t))
    let gamma = tape.add_scalar(angle, -2.0);
    let mut dist = tape.scalar(0.0);
    for (d, e) in [(dx, g.enclose_w), (dy, g.enclose_h)] {
        let r = tape.div(d, e)?;
        let r2 = tape.square(r);
        let a = tape.mul(gamma, r2)?;
        let ex = tape.exp(a);
        let term = tape.neg(ex);
        let term = tape.add_scalar(term, 1.0);
        dist = tape.add(dist, term)?;
    }
    // shape cost sum (1 - exp(-omega))^4, omega = |w - w_gt| / max(w, w_gt)
    let mut shape = tape.scalar(0.0);
    for (a, b) in [(pred.w, gt.w), (pred.h, gt.h)] {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        let m = tape.maximum(a, b)?;
        let omega = tape.div(d, m)?;
        let e = tape.neg(omega);
        let e = tape.exp(e);
        let e = tape.neg(e);
        let e = tape.add_scalar(e, 1.0);
        let e = tape.powf(e, 4.0);
        shape = tape.add(shape, e)?;
    }
    let extra = tape.add(dist, shape)?;
    let extra = tape.scale(extra, 0.5);
    tape.add(one_minus_iou, extra)
}

/// Loss of a single pair, evaluated on a private tape.
pub fn loss_value(pred: &BBox, gt: &BBox, state: &LossState) -> Result<f64> {
    let mut tape = Tape::new();
    let p = BoxVars::from_boxes(&mut tape, std::slice::from_ref(pred), false);
    let g = BoxVars::from_boxes(&mut tape, std::slice::from_ref(gt), false);
    let l = box_loss(&mut tape, &p, &g, state)?;
    Ok(tape.value(l.per_box).item())
}

/// Loss of a single pair and its gradient w.r.t. the predicted centre.
pub fn loss_and_center_grad(pred: &BBox, gt: &BBox, state: &LossState) -> Result<(f64, [f64; 2])> {
    let mut tape = Tape::new();
    let p = BoxVars::from_boxes(&mut tape, std::slice::from_ref(pred), true);
    let g = BoxVars::from_boxes(&mut tape, std::slice::from_ref(gt), false);
    let l = box_loss(&mut tape, &p, &g, state)?;
    let s = tape.sum_all(l.per_box);
    tape.backward(s)?;
    let gx = tape.grad(p.cx).map_or(0.0, |g| g[0]);
    let gy = tape.grad(p.cy).map_or(0.0, |g| g[0]);
    Ok((tape.value(s).item(), [gx, gy]))
}

/// IoU by counting covered `1/grid` subcells; exact when every corner is a
/// multiple of `1/grid`.
pub fn rasterized_iou_oracle(pred: &BBox, gt: &BBox, grid: u32) -> f64 {
    let g = grid as f64;
    let cell = |v: f64| (v * g).round() as i64;
    let [a, b] = [pred, gt].map(|bx| {
        let [x1, y1, x2, y2] = bx.corners();
        [cell(x1), cell(y1), cell(x2), cell(y2)]
    });
    let (x0, x1) = (a[0].min(b[0]), a[2].max(b[2]));
    let (y0, y1) = (a[1].min(b[1]), a[3].max(b[3]));
    let inside = |r: &[i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests;

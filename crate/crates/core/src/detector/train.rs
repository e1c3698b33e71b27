//! Detection loss, SGD with momentum and decoupled weight decay, and the
//! epoch loop that writes per-epoch validation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::assign::{assign, LevelGrid, PositiveCell};
use super::data::{random_flip_shift, Dataset, GroundTruth};
use super::decode::decode_and_nms;
use super::eval::evaluate;
use super::model::Detector;
use crate::error::{Error, Result};
use crate::losses::{box_loss_with, BoxVars, DetachedTerms, LossState};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch's learning rate as a fraction of `lr`; linear decay between.
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seed of the batch order.
    pub seed: u64,
    pub lambda_box: f64,
    pub lambda_cls: f64,
    /// Operating point for precision and recall.
    pub conf_thresh: f64,
    pub nms_iou: f64,
    /// Lowest confidence kept for AP.
    pub eval_conf_thresh: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Random horizontal flips and shifts of training images.
    pub augment: bool,
    /// Largest shift per axis, pixels.
    pub max_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 60,
            lr: 0.01,
            lr_final: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            lambda_box: 1.0,
            lambda_cls: 1.0,
            conf_thresh: 0.25,
            nms_iou: 0.5,
            eval_conf_thresh: 0.001,
            grad_clip: 10.0,
            augment: true,
            max_shift: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_final", self.lr_final),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("conf_thresh", self.conf_thresh), ("nms_iou", self.nms_iou), ("eval_conf_thresh", self.eval_conf_thresh)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Learning rate of `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = if self.epochs > 1 { (epoch - 1) as f64 / (self.epochs - 1) as f64 } else { 0.0 };
        self.lr * (1.0 - progress * (1.0 - self.lr_final))
    }
}

/// Stacks images into a `[N, 3, H, W]` tensor.
pub fn batch_tensor(data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let first = &data.images[indices[0]];
    let (w, h) = (first.width, first.height);
    let mut buf = Vec::with_capacity(indices.len() * 3 * w * h);
    for &i in indices {
        let img = &data.images[i];
        if (img.width, img.height) != (w, h) {
            return Err(Error::shape(format!("image {i} is {}x{}, batch is {w}x{h}", img.width, img.height)));
        }
        buf.extend(img.to_chw());
    }
    Tensor::new(vec![indices.len(), 3, h, w], buf)
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub box_term: f64,
    pub cls_term: f64,
    pub positives: usize,
    /// Detached `1 - IoU` of every positive, for the running mean.
    pub liou: Vec<f64>,
    /// Gradient-free terms of the box loss at this point.
    pub detached: DetachedTerms,
}

/// `lambda_box * sum(box) / max(P, 1) + lambda_cls * sum(BCE) / max(P, 1)`,
/// BCE over every cell and class, box loss over the `P` positive cells.
pub fn detection_loss(
    tape: &mut Tape,
    maps: &[Var],
    labels: &[Vec<GroundTruth>],
    grids: &[LevelGrid],
    state: &LossState,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    detection_loss_with(tape, maps, labels, grids, state, cfg, None)
}

/// As [`detection_loss`], with the box loss's detached terms optionally held
/// at given values (see [`box_loss_with`]).
pub fn detection_loss_with(
    tape: &mut Tape,
    maps: &[Var],
    labels: &[Vec<GroundTruth>],
    grids: &[LevelGrid],
    state: &LossState,
    cfg: &TrainConfig,
    held: Option<&DetachedTerms>,
) -> Result<LossBreakdown> {
    let positives = assign(labels, grids);
    let norm = positives.len().max(1) as f64;

    let mut cls_sum: Option<Var> = None;
    for (l, (&map, grid)) in maps.iter().zip(grids).enumerate() {
        let shape = tape.shape(map).to_vec();
        let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if (h, w) != (grid.height, grid.width) {
            return Err(Error::shape(format!("level {l} map is {h}x{w}, grid is {}x{}", grid.height, grid.width)));
        }
        let nc = ch - 4;
        let logits = tape.narrow(map, 1, 4, nc)?;
        let mut target = Tensor::zeros(vec![n, nc, h, w]);
        for p in positives.iter().filter(|p| p.level == l) {
            target.data_mut()[((p.image * nc + p.class) * h + p.y) * w + p.x] = 1.0;
        }
        let bce = tape.bce_with_logits(logits, &target)?;
        let s = tape.sum_all(bce);
        cls_sum = Some(match cls_sum {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let cls_sum = cls_sum.ok_or_else(|| Error::invalid("no prediction maps"))?;
    let cls = tape.scale(cls_sum, cfg.lambda_cls / norm);

    let (total, box_term, liou, detached) = if positives.is_empty() {
        (cls, 0.0, Vec::new(), DetachedTerms::default())
    } else {
        let (pred, gt) = positive_boxes(tape, maps, grids, &positives)?;
        let l = box_loss_with(tape, &pred, &gt, state, held)?;
        let s = tape.sum_all(l.per_box);
        let b = tape.scale(s, cfg.lambda_box / norm);
        let bt = tape.value(b).item();
        (tape.add(b, cls)?, bt, l.liou, l.detached)
    };
    Ok(LossBreakdown {
        total,
        box_term,
        cls_term: tape.value(cls).item(),
        positives: positives.len(),
        liou,
        detached,
    })
}

/// Predicted and target boxes of the positive cells, in assignment order.
/// Distances are `stride * (2 sigmoid(raw))^2`; widths are floored at 1e-3
/// with the floor transparent to the gradient.
pub fn positive_boxes(
    tape: &mut Tape,
    maps: &[Var],
    grids: &[LevelGrid],
    positives: &[PositiveCell],
) -> Result<(BoxVars, BoxVars)> {
    let mut raw: [Vec<Var>; 4] = Default::default();
    let mut consts: [Vec<f64>; 5] = Default::default();
    for (l, (&map, grid)) in maps.iter().zip(grids).enumerate() {
        let cells: Vec<&PositiveCell> = positives.iter().filter(|p| p.level == l).collect();
        if cells.is_empty() {
            continue;
        }
        let shape = tape.shape(map).to_vec();
        let (ch, h, w) = (shape[1], shape[2], shape[3]);
        for (k, r) in raw.iter_mut().enumerate() {
            let idx: Vec<usize> = cells.iter().map(|p| ((p.image * ch + k) * h + p.y) * w + p.x).collect();
            r.push(tape.gather(map, &idx)?);
        }
        for p in cells {
            let [left, top, right, bottom] = grid.cell_bounds(p.y, p.x);
            for (dst, v) in consts.iter_mut().zip([left, top, right, bottom, grid.stride as f64]) {
                dst.push(v);
            }
        }
    }
    let ordered: Vec<PositiveCell> =
        (0..grids.len()).flat_map(|l| positives.iter().filter(move |p| p.level == l).copied()).collect();
    consts[4].iter_mut().for_each(|s| *s *= 4.0);
    let [left, top, right, bottom, scale] = consts.map(|v| tape.constant(Tensor::from_vec(v)));
    let mut dist = Vec::with_capacity(4);
    for r in &raw {
        let v = tape.concat(r, 0)?;
        let g = tape.sigmoid(v);
        let g = tape.square(g);
        dist.push(tape.mul(g, scale)?);
    }
    let x1 = tape.sub(right, dist[0])?;
    let y1 = tape.sub(bottom, dist[1])?;
    let x2 = tape.add(left, dist[2])?;
    let y2 = tape.add(top, dist[3])?;
    // Straight-through floor: an inverted box keeps the gradient of its
    // signed width, so the loss can reopen it.
    let span = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(b, a)?;
        let lift = tape.value(d).map(|v| v.max(1e-3) - v);
        let lift = tape.constant(lift);
        tape.add(d, lift)
    };
    let w = span(tape, x1, x2)?;
    let h = span(tape, y1, y2)?;
    let mid = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let s = tape.add(a, b)?;
        Ok(tape.scale(s, 0.5))
    };
    let pred = BoxVars { cx: mid(tape, x1, x2)?, cy: mid(tape, y1, y2)?, w, h };
    let gt_boxes: Vec<_> = ordered.iter().map(|p| p.gt_box).collect();
    let gt = BoxVars::from_boxes(tape, &gt_boxes, false);
    Ok((pred, gt))
}

/// SGD with momentum: `v <- mu v + g`, `p <- p - lr (v + wd p)`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Sgd { velocity: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], cfg: &TrainConfig) {
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let v = &mut self.velocity[id.index()];
            let p = store.get_mut(id).data_mut();
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = cfg.momentum * *vi + gi;
                *pi -= cfg.lr * (*vi + cfg.weight_decay * *pi);
            }
        }
    }
}

/// Name of the first prediction map or parameter holding a non-finite value.
fn first_non_finite(tape: &Tape, maps: &[Var], store: &ParamStore) -> String {
    for (id, name, t) in store.iter() {
        let _ = id;
        if t.data().iter().any(|v| !v.is_finite()) {
            return format!("parameter `{name}`");
        }
    }
    for (l, &m) in maps.iter().enumerate() {
        if tape.value(m).data().iter().any(|v| !v.is_finite()) {
            return format!("prediction map of level {l}");
        }
    }
    "loss".to_string()
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub box_term: f64,
    pub cls_term: f64,
    pub positives: usize,
    /// L2 norm of the full parameter gradient.
    pub grad_norm: f64,
}

/// One optimisation step on `indices` of `data`.
pub fn train_step(
    model: &Detector,
    store: &mut ParamStore,
    opt: &mut Sgd,
    state: &mut LossState,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let grids = LevelGrid::for_input(model.config.input_size, &model.strides());
    let images = batch_tensor(data, indices)?;
    let labels: Vec<Vec<GroundTruth>> = indices.iter().map(|&i| data.labels[i].clone()).collect();
    let mut tape = Tape::new();
    let (loss, box_term, cls_term, positives, liou, grads) = {
        let mut ctx = Ctx::train(&mut tape, store);
        let x = ctx.tape.constant(images);
        let maps = model.forward(&mut ctx, x)?;
        let lb = detection_loss(ctx.tape, &maps, &labels, &grids, state, cfg)?;
        let loss = ctx.tape.value(lb.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(first_non_finite(ctx.tape, &maps, ctx.store())));
        }
        ctx.tape.backward(lb.total)?;
        (loss, lb.box_term, lb.cls_term, lb.positives, lb.liou, ctx.param_grads())
    };
    let mut grads = grads;
    let grad_norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let k = cfg.grad_clip / grad_norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= k);
    }
    opt.step(store, &grads, cfg);
    if state.variant.uses_running_mean() {
        state.update_state(&liou)?;
    }
    Ok(StepOutcome { loss, box_term, cls_term, positives, grad_norm })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,precision,recall,map50,map5095";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss, self.precision, self.recall, self.map50, self.map5095
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Validation loss and detection metrics. `state` should be in evaluation mode.
pub fn evaluate_model(
    model: &Detector,
    store: &ParamStore,
    state: &LossState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, super::eval::Evaluation)> {
    let grids = LevelGrid::for_input(model.config.input_size, &model.strides());
    let mut dets = Vec::new();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let images = batch_tensor(data, chunk)?;
        let labels: Vec<Vec<GroundTruth>> = chunk.iter().map(|&i| data.labels[i].clone()).collect();
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, store);
        let x = ctx.tape.constant(images);
        let maps = model.forward(&mut ctx, x)?;
        let lb = detection_loss(ctx.tape, &maps, &labels, &grids, state, cfg)?;
        loss_sum += ctx.tape.value(lb.total).item();
        batches += 1;
        let values: Vec<Tensor> = maps.iter().map(|&m| ctx.tape.value(m).clone()).collect();
        for mut d in decode_and_nms(&values, &grids, cfg.eval_conf_thresh, cfg.nms_iou) {
            d.image = chunk[d.image];
            dets.push(d);
        }
    }
    let ev = evaluate(&dets, &data.labels, model.config.num_classes, cfg.conf_thresh);
    Ok((loss_sum / batches.max(1) as f64, ev))
}

/// Parameters and loss statistics after training.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub loss_state: LossState,
}

/// The loss statistics as stored in a checkpoint, for evaluation.
pub fn checkpoint_state(state: &LossState) -> LossState {
    let mut s = state.clone().eval();
    s.running_mean = s.running_mean as f32 as f64;
    s
}

/// Runs `cfg.epochs` epochs. After each epoch the validation set is scored
/// with the parameters and statistics rounded to checkpoint precision, so a
/// reloaded checkpoint reproduces the last row.
pub fn train(
    model: &Detector,
    store: &mut ParamStore,
    state: &mut LossState,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut opt = Sgd::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let cfg = &TrainConfig { lr: cfg.lr_at(epoch), ..cfg.clone() };
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.augment {
                let (images, labels) = batch
                    .iter()
                    .map(|&i| random_flip_shift(&train_set.images[i], &train_set.labels[i], cfg.max_shift, &mut rng))
                    .unzip();
                let aug = Dataset { images, labels };
                let all: Vec<usize> = (0..batch.len()).collect();
                train_step(model, store, &mut opt, state, &aug, &all, cfg)?;
            } else {
                train_step(model, store, &mut opt, state, train_set, batch, cfg)?;
            }
        }
        let rounded = store.rounded_to_f32();
        let (loss, ev) = evaluate_model(model, &rounded, &checkpoint_state(state), val_set, cfg)?;
        let row = EpochMetrics {
            epoch,
            loss,
            precision: ev.precision,
            recall: ev.recall,
            map50: ev.map50,
            map5095: ev.map5095,
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}

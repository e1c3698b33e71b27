//! Turning prediction maps into scored boxes.

use super::assign::{decode, LevelGrid};
use crate::losses::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub matched: bool,
}

/// Edge distance `stride * (2 sigmoid(raw))^2`, bounded by `4 * stride`.
pub fn distance(raw: f64, stride: f64) -> f64 {
    let g = 2.0 * sigmoid(raw);
    stride * g * g
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sorts by descending confidence. Ties break on image, class and corners so
/// the order never depends on the input order.
pub fn sort_by_confidence(dets: &mut [DetectionRecord]) {
    dets.sort_by(|a, b| {
        let key = |d: &DetectionRecord| (d.image, d.class);
        b.confidence
            .total_cmp(&a.confidence)
            .then(key(a).cmp(&key(b)))
            .then_with(|| {
                let (p, q) = (a.bbox.corners(), b.bbox.corners());
                p.iter().zip(&q).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
}

/// Greedy per-image, per-class suppression of boxes overlapping a kept box by
/// more than `iou_thresh`.
pub fn nms(mut dets: Vec<DetectionRecord>, iou_thresh: f64) -> Vec<DetectionRecord> {
    sort_by_confidence(&mut dets);
    let mut kept: Vec<DetectionRecord> = Vec::new();
    for d in dets {
        let suppressed =
            kept.iter().any(|k| k.image == d.image && k.class == d.class && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decodes every cell whose best class score reaches `conf_thresh`, then
/// applies class-wise NMS. `maps[l]` is `[N, 4 + classes, H, W]` with raw
/// distances (see [`distance`]) in the first four channels.
pub fn decode_and_nms(maps: &[Tensor], grids: &[LevelGrid], conf_thresh: f64, iou_thresh: f64) -> Vec<DetectionRecord> {
    let mut dets = Vec::new();
    for (map, grid) in maps.iter().zip(grids) {
        let [n, ch, h, w] = map.shape() else { panic!("prediction maps are 4-d") };
        let (n, ch, h, w) = (*n, *ch, *h, *w);
        let d = map.data();
        let at = |img: usize, c: usize, y: usize, x: usize| d[((img * ch + c) * h + y) * w + x];
        let s = grid.stride as f64;
        for img in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (mut best, mut logit) = (0, f64::NEG_INFINITY);
                    for c in 4..ch {
                        if at(img, c, y, x) > logit {
                            best = c - 4;
                            logit = at(img, c, y, x);
                        }
                    }
                    let conf = sigmoid(logit);
                    if conf < conf_thresh {
                        continue;
                    }
                    let ltrb = [0, 1, 2, 3].map(|k| distance(at(img, k, y, x), s));
                    let [x1, y1, x2, y2] = decode(grid, y, x, ltrb);
                    let Ok(bbox) = BBox::from_corners(x1, y1, x2, y2) else { continue };
                    dets.push(DetectionRecord { image: img, class: best, bbox, confidence: conf, matched: false });
                }
            }
        }
    }
    nms(dets, iou_thresh)
}

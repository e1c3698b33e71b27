//! Precision, recall and COCO-style average precision.

use super::data::GroundTruth;
use super::decode::{sort_by_confidence, DetectionRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Class-mean precision and recall at IoU 0.5 over detections whose
    /// confidence reaches the operating threshold.
    pub precision: f64,
    pub recall: f64,
    /// AP at IoU 0.5 per class; `None` for classes without ground truth.
    pub ap50: Vec<Option<f64>>,
    pub map50: f64,
    pub map5095: f64,
}

/// Marks true positives: highest confidence first, each ground truth matched
/// at most once, to its best-overlapping unmatched box of the same class.
/// `dets` must already be confidence-sorted.
pub fn match_detections(dets: &[DetectionRecord], gts: &[Vec<GroundTruth>], class: usize, iou_thresh: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|d| {
            if d.class != class {
                return false;
            }
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts[d.image].iter().enumerate() {
                if g.class != class || taken[d.image][k] {
                    continue;
                }
                let iou = d.bbox.iou(&g.bbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                taken[d.image][k] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// 101-point interpolated AP of one class; `None` when it has no ground truth.
pub fn average_precision(dets: &[DetectionRecord], gts: &[Vec<GroundTruth>], class: usize, iou_thresh: f64) -> Option<f64> {
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    if n_gt == 0 {
        return None;
    }
    let own: Vec<DetectionRecord> = dets.iter().filter(|d| d.class == class).copied().collect();
    let tp = match_detections(&own, gts, class, iou_thresh);
    let (mut precision, mut recall) = (Vec::with_capacity(tp.len()), Vec::with_capacity(tp.len()));
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        sum += precision.get(idx).copied().unwrap_or(0.0);
    }
    Some(sum / 101.0)
}

/// Scores `dets` against `gts`. AP uses every detection; precision and recall
/// use those with confidence at least `pr_conf_thresh`.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    pr_conf_thresh: f64,
) -> Evaluation {
    let mut sorted = dets.to_vec();
    sort_by_confidence(&mut sorted);
    let classes: Vec<usize> = (0..num_classes).filter(|&c| gts.iter().flatten().any(|g| g.class == c)).collect();
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };

    let ap50: Vec<Option<f64>> = (0..num_classes).map(|c| average_precision(&sorted, gts, c, 0.5)).collect();
    let map50 = mean(ap50.iter().flatten().copied().collect());
    let map5095 = mean(
        (0..10)
            .map(|t| {
                let thr = 0.5 + 0.05 * t as f64;
                mean(classes.iter().filter_map(|&c| average_precision(&sorted, gts, c, thr)).collect())
            })
            .collect(),
    );

    let confident: Vec<DetectionRecord> = sorted.iter().filter(|d| d.confidence >= pr_conf_thresh).copied().collect();
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    for &c in &classes {
        let tp = match_detections(&confident, gts, c, 0.5).iter().filter(|&&t| t).count();
        let n_det = confident.iter().filter(|d| d.class == c).count();
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        ps.push(if n_det == 0 { 0.0 } else { tp as f64 / n_det as f64 });
        rs.push(tp as f64 / n_gt as f64);
    }
    Evaluation { precision: mean(ps), recall: mean(rs), ap50, map50, map5095 }
}

//! Scores hand-made detections: NMS, greedy matching and COCO-style mAP.

use dabfnet::detector::{evaluate, nms, DetectionRecord, GroundTruth};
use dabfnet::losses::BBox;

fn det(image: usize, class: usize, corners: [f64; 4], confidence: f64) -> DetectionRecord {
    let [x1, y1, x2, y2] = corners;
    DetectionRecord { image, class, bbox: BBox::from_corners(x1, y1, x2, y2).unwrap(), confidence, matched: false }
}

fn main() -> dabfnet::error::Result<()> {
    let gts = vec![
        vec![
            GroundTruth { class: 0, bbox: BBox::from_corners(10.0, 10.0, 20.0, 20.0)? },
            GroundTruth { class: 1, bbox: BBox::from_corners(30.0, 20.0, 38.0, 40.0)? },
        ],
        vec![GroundTruth { class: 0, bbox: BBox::from_corners(40.0, 40.0, 48.0, 48.0)? }],
    ];
    let raw = vec![
        det(0, 0, [10.0, 10.0, 20.0, 20.0], 0.9),
        det(0, 0, [11.0, 10.0, 21.0, 20.0], 0.8), // duplicate, removed by NMS
        det(0, 1, [30.0, 21.0, 38.0, 41.0], 0.7),
        det(1, 0, [41.0, 40.0, 49.0, 49.0], 0.6),
        det(1, 1, [0.0, 0.0, 8.0, 8.0], 0.5), // false positive
    ];
    let kept = nms(raw.clone(), 0.5);
    println!("{} detections, {} after NMS", raw.len(), kept.len());
    let e = evaluate(&kept, &gts, 2, 0.25);
    println!("precision {:.3} recall {:.3}", e.precision, e.recall);
    println!("AP50 per class {:?}", e.ap50);
    println!("mAP@0.5 {:.4}  mAP@[.5:.95] {:.4}", e.map50, e.map5095);
    Ok(())
}

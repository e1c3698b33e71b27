//! The nine box-regression losses on three hand-checkable pairs.

use dabfnet::losses::{loss_and_center_grad, BBox, LossState, LossVariant};

fn main() -> dabfnet::error::Result<()> {
    let pairs = [
        ("one-third IoU", BBox::from_corners(0.0, 0.0, 2.0, 2.0)?, BBox::from_corners(1.0, 0.0, 3.0, 2.0)?),
        ("disjoint", BBox::from_corners(0.0, 0.0, 1.0, 1.0)?, BBox::from_corners(2.0, 0.0, 3.0, 1.0)?),
        ("identical", BBox::new(5.0, 5.0, 4.0, 2.0)?, BBox::new(5.0, 5.0, 4.0, 2.0)?),
    ];
    for (name, pred, gt) in pairs {
        println!("{name}: pred {:?} gt {:?} iou {:.4}", pred.corners(), gt.corners(), pred.iou(&gt));
        for v in LossVariant::ALL {
            // v2 and v3 read a running mean of 1 - IoU; 0.5 is a mid-training value
            let state = LossState { running_mean: 0.5, ..LossState::new(v) }.eval();
            let (loss, g) = loss_and_center_grad(&pred, &gt, &state)?;
            println!("  {:<6} loss {:>9.6}  d/dcentre ({:>8.5}, {:>8.5})", v.name(), loss, g[0], g[1]);
        }
    }
    println!("WIoU-v1 on the one-third pair: exp(1/13) * 2/3 = {:.7}", (1.0f64 / 13.0).exp() * 2.0 / 3.0);
    Ok(())
}

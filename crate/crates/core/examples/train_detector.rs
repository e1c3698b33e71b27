//! Trains a small detector for a few epochs from a config written in code,
//! then reloads the checkpoint and scores it again.

use dabfnet::config::RunConfig;
use dabfnet::experiment::{evaluate_checkpoint, train_run, CHECKPOINT_NAME};

const CONFIG: &str = "\
input_size = 32
image_size = 32
stem_width = 8
stage_widths = 8,16,16,16
channels = 8
head_blocks = 1
max_targets = 2
hat_size = 6,8
person_width = 5,7
person_height = 10,14
epochs = 4
batch_size = 8
train_count = 48
val_count = 16
";

fn main() -> dabfnet::error::Result<()> {
    let mut cfg = RunConfig::parse(CONFIG)?;
    cfg.out_dir = std::env::temp_dir().join("dabfnet-train");
    println!("epoch  loss      P      R      mAP50  mAP50-95");
    let out = train_run(&cfg, |m| {
        println!("{:>5}  {:.4}  {:.3}  {:.3}  {:.3}  {:.3}", m.epoch, m.loss, m.precision, m.recall, m.map50, m.map5095)
    })?;
    println!("{:.6} GFLOPs per 32x32 image; outputs in {}", out.gflops, out.out_dir.display());
    let again = evaluate_checkpoint(&cfg, &out.out_dir.join(CHECKPOINT_NAME))?;
    println!("reloaded checkpoint: mAP50 {:.3} (last epoch {:.3})", again.map50, out.last().map_or(0.0, |m| m.map50));
    Ok(())
}

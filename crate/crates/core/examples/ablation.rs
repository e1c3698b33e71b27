//! All eight head/neck/loss combinations on a toy problem, one seed each.

use dabfnet::config::RunConfig;
use dabfnet::experiment::{ablate, ablation_csv, Variant};

const CONFIG: &str = "\
input_size = 32
image_size = 32
stem_width = 4
stage_widths = 4,8,8,8
channels = 8
head_blocks = 1
head_samples = 1
max_targets = 2
hat_size = 6,8
person_width = 5,7
person_height = 10,14
epochs = 2
batch_size = 8
train_count = 24
val_count = 8
";

fn main() -> dabfnet::error::Result<()> {
    let cfg = RunConfig::parse(CONFIG)?;
    let out = std::env::temp_dir().join("dabfnet-ablation");
    let runs = ablate(&cfg, &Variant::ALL, &[0], &out, |r| {
        println!("{:<18} mAP50 {:.3}  {:.6} GFLOPs", r.variant.name(), r.metrics.map50, r.gflops)
    })?;
    print!("\n{}", ablation_csv(&runs));
    Ok(())
}

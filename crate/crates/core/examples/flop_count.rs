//! Analytic FLOP counts for every head and neck combination.

use dabfnet::bwfpn::NeckKind;
use dabfnet::detector::{count_flops, HeadKind, ModelConfig};

fn main() -> dabfnet::error::Result<()> {
    println!("{:<7} {:<6} {:>12} {:>12} {:>12} {:>10}", "head", "neck", "backbone", "neck", "head", "GFLOPs");
    for head in [HeadKind::Plain, HeadKind::DaHead] {
        for neck in [NeckKind::Fpn, NeckKind::Panet, NeckKind::Bwfpn] {
            let r = count_flops(&ModelConfig { head, neck, ..ModelConfig::default() })?;
            println!(
                "{:<7} {:<6} {:>12} {:>12} {:>12} {:>10.6}",
                head.to_string(),
                neck.to_string(),
                r.subtotal("backbone"),
                r.subtotal("neck"),
                r.subtotal("head"),
                r.gflops()
            );
        }
    }
    let r = count_flops(&ModelConfig::default())?;
    println!("\nlargest layers of the default model:");
    let mut layers = r.layers.clone();
    layers.sort_by(|a, b| b.flops.cmp(&a.flops));
    for l in layers.iter().take(8) {
        println!("  {:<28} {:>10}", l.name, l.flops);
    }
    Ok(())
}

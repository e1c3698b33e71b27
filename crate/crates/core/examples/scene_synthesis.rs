//! Renders synthetic helmet scenes and writes them as PPM images with labels.

use dabfnet::detector::{generate_scene, Dataset, SceneSpec};

fn main() -> dabfnet::error::Result<()> {
    let spec = SceneSpec::default();
    for index in 0..3 {
        let (img, gts) = generate_scene(&spec, index);
        println!("scene {index}: {}x{}, {} targets", img.width, img.height, gts.len());
        for g in &gts {
            let class = if g.class == 0 { "hat" } else { "person" };
            println!("  {class:<6} centre ({:.1}, {:.1}) size {}x{}", g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h);
        }
    }
    let dir = std::env::temp_dir().join("dabfnet-scenes");
    Dataset::synthetic(&spec, 0, 8).save(&dir)?;
    let back = Dataset::load(&dir)?;
    println!("saved and reloaded {} scenes under {}", back.len(), dir.display());
    Ok(())
}

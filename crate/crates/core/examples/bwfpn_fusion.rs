//! Builds the FPN, PANet and weighted bi-directional fusion graphs, then runs
//! a weighted neck on a random three-level pyramid.

use dabfnet::bwfpn::{FusionTopology, Neck, NeckKind};
use dabfnet::dahead::FeaturePyramid;
use dabfnet::nn::{Ctx, ParamStore};
use dabfnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dabfnet::error::Result<()> {
    for kind in [NeckKind::Fpn, NeckKind::Panet, NeckKind::Bwfpn] {
        let t = FusionTopology::build(kind, 3, 1)?;
        println!("{kind}: {} fusion nodes", t.fusion_nodes());
        for (from, to) in t.edges() {
            println!("  {from} -> {to}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let c = 8;
    let neck = Neck::new(&mut store, "neck", FusionTopology::build(NeckKind::Bwfpn, 3, 2)?, c, &mut rng);

    let mut tape = Tape::new();
    let levels = [16, 8, 4]
        .iter()
        .map(|&s| {
            let data = (0..c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, c, s, s], data).map(|t| tape.constant(t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pyramid = FeaturePyramid::new(&tape, levels, vec![8, 16, 32])?;
    let mut ctx = Ctx::eval(&mut tape, &store);
    for node in &neck.layers[0] {
        let w = node.normalized_weights(&mut ctx)?;
        println!("{} normalised weights {:?}", node.label, ctx.tape.value(w).data());
    }
    let out = neck.forward(&mut ctx, &pyramid)?;
    for (l, v) in out.levels.iter().enumerate() {
        println!("output level {l}: shape {:?}", ctx.tape.value(*v).shape());
    }
    Ok(())
}

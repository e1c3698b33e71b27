//! Runs the attention head on a random pyramid and shows what each attention
//! stage computes at initialisation and after zeroing its predictors.

use dabfnet::dahead::{unify, DAHead, DAHeadConfig, FeaturePyramid};
use dabfnet::nn::{Ctx, ParamStore};
use dabfnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dabfnet::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = DAHeadConfig { num_levels: 3, channels: 8, num_blocks: 2, samples: 9, reduction: 4, num_classes: 2 };
    let mut store = ParamStore::new();
    let head = DAHead::new(&mut store, "head", config.clone(), &mut rng)?;
    println!("{} parameters in {} blocks", store.num_scalars(), head.blocks.len());

    let mut tape = Tape::new();
    let levels = [16, 8, 4]
        .iter()
        .map(|&s| {
            let data = (0..config.channels * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, config.channels, s, s], data).map(|t| tape.constant(t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pyramid = FeaturePyramid::new(&tape, levels, vec![8, 16, 32])?;
    let unified = unify(&mut tape, &pyramid)?;
    println!("unified feature {:?} (levels resampled to the median grid)", tape.value(unified.tensor).shape());

    let block = &head.blocks[0];
    let mut ctx = Ctx::eval(&mut tape, &store);
    let w = block.scale.level_weights(&mut ctx, &unified)?;
    println!("scale attention at init: {:?}", ctx.tape.value(w).data());
    let (points, mask) = block.spatial.sampling(&mut ctx, &unified)?;
    let (p, m) = (ctx.tape.value(points), ctx.tape.value(mask));
    let hw = 8 * 8;
    let taps: Vec<(f64, f64)> = (0..9).map(|k| (p.at(&[0, k * hw, 0]), p.at(&[0, k * hw, 1]))).collect();
    println!("spatial attention sample points of pixel (0, 0): {taps:?}");
    println!(
        "modulation in [{:.3}, {:.3}]",
        m.data().iter().cloned().fold(f64::INFINITY, f64::min),
        m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    let co = block.task.coefficients(&mut ctx, &unified)?;
    let co = ctx.tape.value(co);
    println!("task attention coefficients (a1, b1, a2, b2) of channel 0: {:?}", (0..4).map(|j| co.at(&[0, j, 0])).collect::<Vec<_>>());

    // zeroing the level predictor gives the hard-sigmoid midpoint, 0.5 per level
    let mut zeroed = store.clone();
    zeroed.get_mut(block.scale.weight).fill(0.0);
    zeroed.get_mut(block.scale.bias).fill(0.0);
    let mut ctx = Ctx::eval(&mut tape, &zeroed);
    let w = block.scale.level_weights(&mut ctx, &unified)?;
    println!("scale attention with zeroed predictor: {:?}", ctx.tape.value(w).data());

    let mut ctx = Ctx::eval(&mut tape, &store);
    let maps = head.forward(&mut ctx, &pyramid)?;
    for (l, m) in maps.iter().enumerate() {
        println!("prediction map {l}: {:?}", ctx.tape.value(*m).shape());
    }
    Ok(())
}

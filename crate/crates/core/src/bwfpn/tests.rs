use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{GradCheck, Tape};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn edge_set(pairs: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn set_identity_convs(store: &mut ParamStore, neck: &Neck) {
    let c = neck.channels;
    for node in neck.layers.iter().flatten() {
        let w = store.get_mut(node.post_conv.weight);
        w.fill(0.0);
        for ch in 0..c {
            w.data_mut()[(ch * c + ch) * 9 + 4] = 1.0;
        }
    }
}

fn weighted_node(store: &mut ParamStore, weights: &[f64]) -> FusionNode {
    let mut r = rng(0);
    let node = FusionNode::new(
        store,
        "n",
        "n".into(),
        weights.len(),
        FusionMode::Weighted { epsilon: DEFAULT_EPSILON },
        1,
        &mut r,
    );
    store.set(node.weights.unwrap(), Tensor::from_vec(weights.to_vec())).unwrap();
    node
}

fn combine_scalars(weights: &[f64], values: &[f64]) -> f64 {
    let mut store = ParamStore::new();
    let node = weighted_node(&mut store, weights);
    let mut tape = Tape::new();
    let inputs: Vec<Var> = values.iter().map(|&v| tape.constant(Tensor::full(vec![1, 1, 1, 1], v))).collect();
    let mut ctx = Ctx::eval(&mut tape, &store);
    let out = node.combine(&mut ctx, &inputs).unwrap();
    ctx.tape.value(out).item()
}

#[test]
fn fuse_examples() {
    let v = combine_scalars(&[1.0, 1.0], &[2.0, 4.0]);
    assert!((v - 6.0 / 2.0001).abs() <= 1e-15, "{v}");
    assert!((v - 2.99985).abs() < 1e-5);
    let v = combine_scalars(&[1.0, 0.0], &[2.0, 4.0]);
    assert!((v - 2.0 / 1.0001).abs() <= 1e-15);
    assert_eq!(combine_scalars(&[0.0, 0.0], &[2.0, 4.0]), 0.0);
    // negative raw weights are clipped
    assert_eq!(combine_scalars(&[-3.0, 1.0], &[2.0, 4.0]), combine_scalars(&[0.0, 1.0], &[2.0, 4.0]));
}

#[test]
fn fuse_rejects_single_input() {
    let mut store = ParamStore::new();
    let node = weighted_node(&mut store, &[1.0]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let mut ctx = Ctx::eval(&mut tape, &store);
    assert!(node.combine(&mut ctx, &[x]).is_err());
}

#[test]
fn bwfpn_three_levels_has_expected_graph() {
    let t = FusionTopology::build(NeckKind::Bwfpn, 3, 1).unwrap();
    let td = t.nodes.iter().filter(|n| n.role == Role::TopDown).count();
    let out = t.nodes.iter().filter(|n| n.role == Role::Output).count();
    assert_eq!((td, out), (1, 3));
    assert_eq!(t.nodes.iter().filter(|n| n.inputs.len() == 3).count(), 1);
    assert_eq!(
        t.edges(),
        edge_set(&[
            ("in1", "td1"),
            ("in2", "td1"),
            ("in0", "out0"),
            ("td1", "out0"),
            ("in1", "out1"),
            ("td1", "out1"),
            ("out0", "out1"),
            ("in2", "out2"),
            ("out1", "out2"),
        ])
    );
}

#[test]
fn five_level_graph_follows_the_same_pattern() {
    let t = FusionTopology::build(NeckKind::Bwfpn, 5, 1).unwrap();
    let labels: Vec<String> = t.nodes.iter().map(NodeSpec::label).collect();
    assert_eq!(labels, ["td3", "td2", "td1", "out0", "out1", "out2", "out3", "out4"]);
    assert_eq!(t.nodes.iter().filter(|n| n.inputs.len() == 3).count(), 3);
    let e = t.edges();
    assert!(e.contains(&("in4".into(), "td3".into())));
    assert!(e.contains(&("td1".into(), "out0".into())));
    assert!(e.contains(&("in4".into(), "out4".into())));
}

#[test]
fn topology_rejects_one_level() {
    for kind in [NeckKind::Fpn, NeckKind::Panet, NeckKind::Bwfpn] {
        assert!(FusionTopology::build(kind, 1, 1).is_err());
    }
}

#[test]
fn fpn_has_no_bottom_up_edges() {
    let t = FusionTopology::build(NeckKind::Fpn, 4, 1).unwrap();
    for n in &t.nodes {
        assert_eq!(n.role, Role::TopDown);
        for &s in &n.inputs {
            let from = match s {
                Source::Input(l) => l,
                Source::Node(j) => t.nodes[j].level,
            };
            assert!(from >= n.level);
        }
    }
}

#[test]
fn reference_graphs_nest() {
    for levels in 2..=6 {
        let fpn = FusionTopology::build(NeckKind::Fpn, levels, 1).unwrap();
        let panet = FusionTopology::build(NeckKind::Panet, levels, 1).unwrap();
        let bw = FusionTopology::build(NeckKind::Bwfpn, levels, 1).unwrap();
        assert!(fpn.edges().is_subset(&panet.edges()));
        assert!(fpn.edges() != panet.edges());

        // PANet with single-input nodes elided, plus the input-to-output skips
        let mut collapsed = panet.clone();
        collapsed.elide_single_inputs();
        let mut expected = collapsed.edges();
        for n in &collapsed.nodes {
            if n.role == Role::Output {
                expected.insert((format!("in{}", n.level), n.label()));
            }
        }
        assert_eq!(bw.edges(), expected, "levels {levels}");
        for n in &bw.nodes {
            assert!(n.inputs.len() >= 2);
            if n.role == Role::Output {
                assert!(n.inputs.contains(&Source::Input(n.level)));
            }
        }
    }
}

fn build_neck(kind: NeckKind, layers: usize, c: usize, seed: u64) -> (ParamStore, Neck) {
    let mut store = ParamStore::new();
    let t = FusionTopology::build(kind, 3, layers).unwrap();
    let neck = Neck::new(&mut store, "neck", t, c, &mut rng(seed));
    (store, neck)
}

fn pyramid_of(tape: &mut Tape, tensors: &[Tensor]) -> FeaturePyramid {
    let levels = tensors.iter().map(|t| tape.constant(t.clone())).collect();
    FeaturePyramid::new(tape, levels, vec![8, 16, 32]).unwrap()
}

fn random_pyramid(c: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    [8, 4, 2].iter().map(|&s| random(&[1, c, s, s], r)).collect()
}

#[test]
fn stacked_layers_chain_outputs() {
    let c = 3;
    let (store, neck) = build_neck(NeckKind::Bwfpn, 2, c, 1);
    let mut r = rng(2);
    let inputs = random_pyramid(c, &mut r);
    let mut tape = Tape::new();
    let p = pyramid_of(&mut tape, &inputs);
    let mut ctx = Ctx::eval(&mut tape, &store);
    let two = neck.forward(&mut ctx, &p).unwrap();

    let first = Neck { layers: vec![neck.layers[0].clone()], ..neck.clone() };
    let second = Neck { layers: vec![neck.layers[1].clone()], ..neck.clone() };
    let mid = first.forward(&mut ctx, &p).unwrap();
    let again = second.forward(&mut ctx, &mid).unwrap();
    for (a, b) in two.levels.iter().zip(&again.levels) {
        assert_eq!(ctx.tape.value(*a), ctx.tape.value(*b));
    }
}

#[test]
fn constant_pyramid_is_discounted_by_epsilon() {
    let c = 2;
    let (mut store, neck) = build_neck(NeckKind::Bwfpn, 1, c, 3);
    set_identity_convs(&mut store, &neck);
    let mut tape = Tape::new();
    // constant across levels and positions; identity convs see zero padding,
    // but a centre-only kernel never reads it
    let inputs: Vec<Tensor> = [8, 4, 2].iter().map(|&s| Tensor::full(vec![1, c, s, s], 1.5)).collect();
    let p = pyramid_of(&mut tape, &inputs);
    let mut ctx = Ctx::eval(&mut tape, &store);
    let out = neck.forward(&mut ctx, &p).unwrap();
    let s2 = 2.0 / (2.0 + DEFAULT_EPSILON);
    let s3 = 3.0 / (3.0 + DEFAULT_EPSILON);
    let td1 = 1.5 * s2;
    let out0 = (1.5 + td1) / (2.0 + DEFAULT_EPSILON);
    let out1 = (1.5 + td1 + out0) / (3.0 + DEFAULT_EPSILON);
    let out2 = (1.5 + out1) / (2.0 + DEFAULT_EPSILON);
    for (v, want) in out.levels.iter().zip([out0, out1, out2]) {
        assert!(ctx.tape.value(*v).data().iter().all(|&x| (x - want).abs() <= 1e-12));
    }
    assert!(out1 < 1.5 * s3 && out1 > 1.5 * s2 * s3 * s2);
}

#[test]
fn zero_pyramid_maps_to_zero() {
    for kind in [NeckKind::Fpn, NeckKind::Panet, NeckKind::Bwfpn] {
        let (store, neck) = build_neck(kind, 2, 3, 4);
        let mut tape = Tape::new();
        let inputs: Vec<Tensor> = [8, 4, 2].iter().map(|&s| Tensor::zeros(vec![2, 3, s, s])).collect();
        let p = pyramid_of(&mut tape, &inputs);
        let mut ctx = Ctx::eval(&mut tape, &store);
        let out = neck.forward(&mut ctx, &p).unwrap();
        assert_eq!(out.strides, p.strides);
        for (o, i) in out.levels.iter().zip(&inputs) {
            assert_eq!(ctx.tape.value(*o), i);
        }
    }
}

fn up2(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let w = h;
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn down2(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let (oh, w) = (h / 2, h);
    let mut out = vec![0.0; c * oh * oh];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..oh {
                out[(ch * oh + y) * oh + xx] = x[(ch * h + 2 * y) * w + 2 * xx];
            }
        }
    }
    out
}

fn mix(parts: &[&[f64]]) -> Vec<f64> {
    let denom = parts.len() as f64 + DEFAULT_EPSILON;
    (0..parts[0].len()).map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / denom).collect()
}

#[test]
fn unrolled_formula_matches_graph_execution() {
    let c = 3;
    let (mut store, neck) = build_neck(NeckKind::Bwfpn, 1, c, 5);
    set_identity_convs(&mut store, &neck);
    let mut r = rng(6);
    let inputs = random_pyramid(c, &mut r);
    let (in0, in1, in2) = (inputs[0].data(), inputs[1].data(), inputs[2].data());

    let td1 = mix(&[in1, &up2(in2, c, 2)]);
    let out0 = mix(&[in0, &up2(&td1, c, 4)]);
    let out1 = mix(&[in1, &td1, &down2(&out0, c, 8)]);
    let out2 = mix(&[in2, &down2(&out1, c, 4)]);

    let mut tape = Tape::new();
    let p = pyramid_of(&mut tape, &inputs);
    let mut ctx = Ctx::eval(&mut tape, &store);
    let out = neck.forward(&mut ctx, &p).unwrap();
    for (v, want) in out.levels.iter().zip([out0, out1, out2]) {
        let got = ctx.tape.value(*v).data();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn run_neck_rejects_level_mismatch() {
    let (store, neck) = build_neck(NeckKind::Bwfpn, 1, 2, 7);
    let mut tape = Tape::new();
    let inputs: Vec<Tensor> = [8, 4].iter().map(|&s| Tensor::zeros(vec![1, 2, s, s])).collect();
    let levels = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let p = FeaturePyramid::new(&tape, levels, vec![8, 16]).unwrap();
    let mut ctx = Ctx::eval(&mut tape, &store);
    assert!(neck.forward(&mut ctx, &p).is_err());

    let wrong = [8, 4, 2].iter().map(|&s| ctx.tape.constant(Tensor::zeros(vec![1, 3, s, s]))).collect();
    let p = FeaturePyramid::new(ctx.tape, wrong, vec![8, 16, 32]).unwrap();
    let err = neck.forward(&mut ctx, &p).unwrap_err().to_string();
    assert!(err.contains("td1"), "{err}");
}

#[test]
fn bwfpn_layer_gradient_check() {
    let c = 2;
    let (store, neck) = build_neck(NeckKind::Bwfpn, 1, c, 8);
    let mut r = rng(9);
    let ids: Vec<ParamId> = store.ids().collect();
    for point in 0..5u64 {
        let mut at = random_pyramid(c, &mut r);
        for &id in &ids {
            let t = store.get(id);
            // fusion weights stay clear of the relu kink at zero
            at.push(if t.ndim() == 1 && store.name(id).ends_with(".w") {
                Tensor::from_vec((0..t.numel()).map(|_| r.gen_range(0.2..1.5)).collect())
            } else {
                t.clone()
            });
        }
        let report = GradCheck::new(1e-5, 1e-4)
            .seed(point)
            .run(
                |tape, vars| {
                    let p = FeaturePyramid::new(tape, vars[..3].to_vec(), vec![8, 16, 32])?;
                    let mut ctx = Ctx::eval(tape, &store);
                    for (&id, &v) in ids.iter().zip(&vars[3..]) {
                        ctx.bind(id, v);
                    }
                    let out = neck.forward(&mut ctx, &p)?;
                    let mut total = ctx.tape.scalar(0.0);
                    for (k, &l) in out.levels.iter().enumerate() {
                        let sq = ctx.tape.square(l);
                        let s = ctx.tape.sum_all(sq);
                        let s = ctx.tape.scale(s, 1.0 + k as f64);
                        total = ctx.tape.add(total, s)?;
                    }
                    Ok(total)
                },
                &at,
            )
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn flops_count_post_convs_and_fusion() {
    let (_, neck) = build_neck(NeckKind::Bwfpn, 1, 16, 10);
    let f = neck.flops_by_node(&[(8, 8), (4, 4), (2, 2)]);
    assert_eq!(f.len(), 4);
    let (name, out0) = &f[1];
    assert_eq!(name, "neck.l0.out0");
    assert_eq!(*out0, 2 * 8 * 8 * 16 * 16 * 9 + 2 * 16 * 64);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn normalized(weights: &[f64]) -> Vec<f64> {
        let mut store = ParamStore::new();
        let node = weighted_node(&mut store, weights);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let w = node.normalized_weights(&mut ctx).unwrap();
        ctx.tape.value(w).data().to_vec()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn normalized_weights_lie_in_unit_interval(raw in proptest::collection::vec(-1e3f64..1e3, 2..=3)) {
            let w = normalized(&raw);
            let pos: f64 = raw.iter().map(|v| v.max(0.0)).sum();
            let total: f64 = w.iter().sum();
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((total - pos / (pos + DEFAULT_EPSILON)).abs() <= 1e-12);
            prop_assert!(total < 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn fused_values_bounded_for_nonnegative_inputs(
            raw in proptest::collection::vec(-2.0f64..5.0, 3),
            vals in proptest::collection::vec(0.0f64..10.0, 3),
        ) {
            let pos: f64 = raw.iter().map(|v| v.max(0.0)).sum();
            let s = pos / (pos + DEFAULT_EPSILON);
            let out = combine_scalars(&raw, &vals);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) * s;
            let hi = vals.iter().cloned().fold(0.0, f64::max) * s;
            prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
        }
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assign::{cell_index, decode, encode, level_for};
use super::checkpoint;
use super::data::{flip_shift, format_labels, parse_labels, random_flip_shift};
use super::flops::{conv_flops, model_flops};
use super::train::{batch_tensor, metrics_csv};
use super::*;
use crate::bwfpn::NeckKind;
use crate::losses::{BBox, LossState, LossVariant};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::tensor::{Tape, Tensor};

fn gt(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth {
    GroundTruth { class, bbox: BBox::new(cx, cy, w, h).unwrap() }
}

fn det(image: usize, class: usize, b: BBox, confidence: f64) -> DetectionRecord {
    DetectionRecord { image, class, bbox: b, confidence, matched: false }
}

fn grids64() -> Vec<LevelGrid> {
    LevelGrid::for_input(64, &[8, 16, 32])
}

fn tiny_model(head: HeadKind, neck: NeckKind) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        stem_width: 4,
        stage_widths: vec![4, 8, 8, 8],
        channels: 8,
        neck,
        head,
        head_blocks: 1,
        head_samples: 1,
        head_reduction: 4,
        ..ModelConfig::default()
    }
}

fn tiny_scenes() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        max_targets: 2,
        hat_size: (6, 8),
        person_width: (5, 7),
        person_height: (10, 14),
        ..SceneSpec::default()
    }
}

/// Raw output whose decoded distance is `d`.
fn raw_for(d: f64, stride: f64) -> f64 {
    let s = (d / stride).sqrt() / 2.0;
    (s / (1.0 - s)).ln()
}

#[test]
fn small_box_centred_in_a_cell_gets_one_level0_positive() {
    let grids = grids64();
    let p = assign(&[vec![gt(0, 20.0, 28.0, 10.0, 12.0)]], &grids);
    assert_eq!(p.len(), 1);
    assert_eq!((p[0].level, p[0].y, p[0].x), (0, 3, 2));
    assert!(p[0].ltrb.iter().all(|&d| d > 0.0));
}

#[test]
fn two_boxes_in_distinct_cells_give_two_positives() {
    let p = assign(&[vec![gt(0, 12.0, 12.0, 10.0, 10.0), gt(1, 44.0, 40.0, 10.0, 24.0)]], &grids64());
    assert_eq!(p.len(), 2);
    assert_eq!((p[1].level, p[1].y, p[1].x), (1, 2, 2));
}

#[test]
fn centre_on_a_boundary_goes_to_the_lower_cell() {
    assert_eq!(cell_index(16.0, 8, 8), 1);
    assert_eq!(cell_index(16.000001, 8, 8), 2);
    assert_eq!(cell_index(0.0, 8, 8), 0);
    let p = assign(&[vec![gt(0, 16.0, 24.0, 10.0, 10.0)]], &grids64());
    assert_eq!((p[0].y, p[0].x), (2, 1));
    assert!(p[0].ltrb.iter().all(|&d| d > 0.0));
}

#[test]
fn level_cutoffs_are_twice_the_stride() {
    let g = grids64();
    assert_eq!(level_for(16.0, &g), 0);
    assert_eq!(level_for(16.5, &g), 1);
    assert_eq!(level_for(32.0, &g), 1);
    assert_eq!(level_for(60.0, &g), 2);
    assert_eq!(level_for(500.0, &g), 2);
}

#[test]
fn same_cell_conflict_keeps_the_smaller_box() {
    let p = assign(&[vec![gt(1, 12.0, 12.0, 14.0, 14.0), gt(0, 13.0, 13.0, 9.0, 9.0)]], &grids64());
    assert_eq!(p.len(), 1);
    assert_eq!((p[0].gt, p[0].class), (1, 0));
}

#[test]
fn assign_decode_round_trip_reproduces_boxes() {
    let spec = SceneSpec::default();
    let grids = grids64();
    for index in 0..40 {
        let (_, labels) = generate_scene(&spec, index);
        let positives = assign(std::slice::from_ref(&labels), &grids);
        let mut maps: Vec<Tensor> = grids.iter().map(|g| Tensor::full(vec![1, 6, g.height, g.width], -40.0)).collect();
        for p in &positives {
            let g = grids[p.level];
            let m = maps[p.level].data_mut();
            for k in 0..4 {
                m[(k * g.height + p.y) * g.width + p.x] = raw_for(p.ltrb[k], g.stride as f64);
            }
            m[((4 + p.class) * g.height + p.y) * g.width + p.x] = 40.0;
        }
        let dets = decode_and_nms(&maps, &grids, 0.5, 1.0);
        assert_eq!(dets.len(), positives.len());
        for p in &positives {
            let d = dets.iter().find(|d| d.class == p.class && d.bbox.iou(&p.gt_box) > 0.9).expect("decoded box");
            let (a, b) = (d.bbox.corners(), p.gt_box.corners());
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-9, "scene {index}: {a:?} vs {b:?}");
            }
            assert!(d.confidence > 1.0 - 1e-12);
        }
    }
}

#[test]
fn encode_decode_are_inverse() {
    let g = LevelGrid { stride: 16, height: 4, width: 4 };
    let b = BBox::from_corners(19.0, 5.0, 31.0, 29.0).unwrap();
    let ltrb = encode(&g, 1, 1, &b);
    let c = decode(&g, 1, 1, ltrb);
    assert_eq!(c, b.corners());
}

#[test]
fn no_cell_above_threshold_gives_no_detections() {
    let grids = grids64();
    let maps: Vec<Tensor> = grids.iter().map(|g| Tensor::full(vec![2, 6, g.height, g.width], -3.0)).collect();
    assert!(decode_and_nms(&maps, &grids, 0.25, 0.5).is_empty());
}

#[test]
fn nms_keeps_the_more_confident_duplicate() {
    let b = BBox::new(10.0, 10.0, 6.0, 6.0).unwrap();
    let kept = nms(vec![det(0, 0, b, 0.8), det(0, 0, b, 0.9)], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].confidence, 0.9);
}

#[test]
fn nms_keeps_disjoint_boxes_and_other_classes() {
    let a = BBox::new(10.0, 10.0, 6.0, 6.0).unwrap();
    let b = BBox::new(30.0, 10.0, 6.0, 6.0).unwrap();
    assert_eq!(nms(vec![det(0, 0, a, 0.9), det(0, 0, b, 0.8)], 0.5).len(), 2);
    assert_eq!(nms(vec![det(0, 0, a, 0.9), det(0, 1, a, 0.8)], 0.5).len(), 2);
    assert_eq!(nms(vec![det(0, 0, a, 0.9), det(1, 0, a, 0.8)], 0.5).len(), 2);
}

#[test]
fn one_hit_and_one_miss() {
    let g = gt(0, 10.0, 10.0, 8.0, 8.0);
    let far = BBox::new(40.0, 40.0, 8.0, 8.0).unwrap();
    let e = evaluate(&[det(0, 0, g.bbox, 0.9), det(0, 0, far, 0.8)], &[vec![g]], 1, 0.25);
    assert!((e.precision - 0.5).abs() < 1e-12);
    assert!((e.recall - 1.0).abs() < 1e-12);
    assert!((e.ap50[0].unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_detections_report_zero() {
    let e = evaluate(&[], &[vec![gt(0, 10.0, 10.0, 8.0, 8.0)]], 2, 0.25);
    assert_eq!((e.precision, e.recall, e.map50, e.map5095), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(e.ap50, vec![Some(0.0), None]);
}

#[test]
fn perfect_detector_scores_one() {
    let spec = SceneSpec::default();
    let labels: Vec<Vec<GroundTruth>> = (0..10).map(|i| generate_scene(&spec, i).1).collect();
    let dets: Vec<DetectionRecord> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, gts)| gts.iter().map(move |g| det(i, g.class, g.bbox, 1.0)))
        .collect();
    let e = evaluate(&dets, &labels, 2, 0.25);
    assert_eq!((e.precision, e.recall, e.map50, e.map5095), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn ap_ranks_a_late_hit_below_an_early_one() {
    let g = gt(0, 10.0, 10.0, 8.0, 8.0);
    let far = BBox::new(40.0, 40.0, 8.0, 8.0).unwrap();
    let late = evaluate(&[det(0, 0, far, 0.9), det(0, 0, g.bbox, 0.8)], &[vec![g]], 1, 0.0);
    // precision 1/2 at recall 1 for every recall point
    assert!((late.ap50[0].unwrap() - 0.5).abs() < 1e-12);
}

fn random_scene_detections(seed: u64) -> (Vec<DetectionRecord>, Vec<Vec<GroundTruth>>) {
    let spec = SceneSpec::default();
    let labels: Vec<Vec<GroundTruth>> = (0..6).map(|i| generate_scene(&spec, seed * 10 + i).1).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::new();
    for (i, gts) in labels.iter().enumerate() {
        for g in gts {
            let b = g.bbox.translated(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            let b = b.scaled(r.gen_range(0.8..1.25));
            // coarse confidences so that ties occur
            dets.push(det(i, g.class, b, (r.gen_range(1..5) as f64) / 4.0));
        }
        for _ in 0..r.gen_range(0..3) {
            let b = BBox::new(r.gen_range(5.0..59.0), r.gen_range(5.0..59.0), 8.0, 10.0).unwrap();
            dets.push(det(i, r.gen_range(0..2), b, (r.gen_range(1..5) as f64) / 4.0));
        }
    }
    (dets, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strict_thresholds_never_raise_map(seed in 0u64..10_000) {
        let (dets, labels) = random_scene_detections(seed);
        let e = evaluate(&dets, &labels, 2, 0.25);
        prop_assert!(e.map5095 <= e.map50 + 1e-12);
    }

    #[test]
    fn evaluation_ignores_the_order_of_equal_confidences(seed in 0u64..10_000) {
        let (dets, labels) = random_scene_detections(seed);
        let mut shuffled = dets.clone();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut r);
        prop_assert_eq!(evaluate(&dets, &labels, 2, 0.25), evaluate(&shuffled, &labels, 2, 0.25));
    }
}

#[test]
fn scenes_are_deterministic() {
    let spec = SceneSpec::default();
    for i in [0, 7, 123] {
        assert_eq!(generate_scene(&spec, i), generate_scene(&spec, i));
    }
    assert_ne!(generate_scene(&spec, 0).0, generate_scene(&spec, 1).0);
    let other = SceneSpec { seed: 43, ..spec.clone() };
    assert_ne!(generate_scene(&spec, 0).0, generate_scene(&other, 0).0);
}

#[test]
fn no_overlap_means_disjoint_boxes() {
    let spec = SceneSpec { overlap_prob: 0.0, min_targets: 4, max_targets: 4, ..SceneSpec::default() };
    for i in 0..200 {
        let (_, gts) = generate_scene(&spec, i);
        for (a, ga) in gts.iter().enumerate() {
            for gb in &gts[a + 1..] {
                assert_eq!(ga.bbox.iou(&gb.bbox), 0.0, "scene {i}");
            }
        }
    }
}

#[test]
fn one_target_spec_gives_one_label() {
    let spec = SceneSpec { min_targets: 1, max_targets: 1, ..SceneSpec::default() };
    for i in 0..50 {
        assert_eq!(generate_scene(&spec, i).1.len(), 1);
    }
}

#[test]
fn boxes_lie_inside_the_image() {
    let spec = SceneSpec::default();
    for i in 0..200 {
        for g in generate_scene(&spec, i).1 {
            let [x1, y1, x2, y2] = g.bbox.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0, "scene {i}");
            assert!(g.class < NUM_CLASSES);
        }
    }
}

#[test]
fn flip_twice_is_identity_and_boxes_follow() {
    let spec = SceneSpec::default();
    let (img, gts) = generate_scene(&spec, 3);
    let (f, fg) = flip_shift(&img, &gts, true, 0, 0);
    let (ff, ffg) = flip_shift(&f, &fg, true, 0, 0);
    assert_eq!(ff, img);
    for (a, b) in ffg.iter().zip(&gts) {
        assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12);
    }
    let (_, shifted) = flip_shift(&img, &gts, false, 3, -2);
    assert!((shifted[0].bbox.cx - gts[0].bbox.cx - 3.0).abs() < 1e-12);
    assert!((shifted[0].bbox.cy - gts[0].bbox.cy + 2.0).abs() < 1e-12);
}

#[test]
fn random_augmentation_keeps_boxes_inside() {
    let spec = SceneSpec::default();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let (img, gts) = generate_scene(&spec, i);
        let (_, moved) = random_flip_shift(&img, &gts, 16, &mut r);
        for g in &moved {
            let [x1, y1, x2, y2] = g.bbox.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0, "scene {i}: {g:?}");
        }
    }
}

#[test]
fn labels_round_trip_through_text() {
    let spec = SceneSpec::default();
    for i in 0..20 {
        let (_, gts) = generate_scene(&spec, i);
        let text = format_labels(&gts, 64, 64);
        let back = parse_labels(&text, 64, 64, std::path::Path::new("x.txt")).unwrap();
        assert_eq!(back.len(), gts.len());
        for (a, b) in back.iter().zip(&gts) {
            assert_eq!(a.class, b.class);
            for (u, v) in a.bbox.corners().iter().zip(b.bbox.corners()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn label_centre_outside_the_image_is_rejected() {
    let err = parse_labels("0 1.2 0.5 0.1 0.1\n", 64, 64, std::path::Path::new("bad.txt"));
    assert!(err.is_err());
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::synthetic(&SceneSpec::default(), 0, 5);
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.images, data.images);
    for (a, b) in back.labels.iter().zip(&data.labels) {
        assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(b) {
            assert!((u.bbox.cx - v.bbox.cx).abs() < 1e-9 && (u.bbox.h - v.bbox.h).abs() < 1e-9);
        }
    }
}

#[test]
fn conv_flop_goldens() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let c = Conv2d::new(&mut store, "a", 16, 32, 3, 1, &mut r);
    assert_eq!(conv_flops(&c, 8, 8), 589_824);
    assert_eq!(conv_flops(&c, 16, 16), 4 * 589_824);
    let one = Conv2d::new(&mut store, "b", 1, 1, 1, 1, &mut r);
    assert_eq!(conv_flops(&one, 1, 1), 2);
}

#[test]
fn flop_total_is_the_sum_of_layers() {
    for head in [HeadKind::Plain, HeadKind::DaHead] {
        for neck in [NeckKind::Fpn, NeckKind::Panet, NeckKind::Bwfpn] {
            let r = count_flops(&ModelConfig { head, neck, ..ModelConfig::default() }).unwrap();
            assert_eq!(r.total(), r.layers.iter().map(|l| l.flops).sum::<u64>());
            assert!(r.layers.iter().all(|l| l.flops > 0));
        }
    }
}

#[test]
fn dahead_costs_more_than_the_plain_head() {
    let plain = count_flops(&ModelConfig { head: HeadKind::Plain, ..ModelConfig::default() }).unwrap();
    let da = count_flops(&ModelConfig { head: HeadKind::DaHead, ..ModelConfig::default() }).unwrap();
    assert!(da.subtotal("head") > plain.subtotal("head"));
    assert_eq!(da.subtotal("backbone"), plain.subtotal("backbone"));
    let fpn = count_flops(&ModelConfig { neck: NeckKind::Fpn, ..ModelConfig::default() }).unwrap();
    let bw = count_flops(&ModelConfig { neck: NeckKind::Bwfpn, ..ModelConfig::default() }).unwrap();
    assert!(bw.subtotal("neck") > fpn.subtotal("neck"));
}

#[test]
fn backbone_flops_scale_with_area() {
    let small = count_flops(&ModelConfig { input_size: 64, ..ModelConfig::default() }).unwrap();
    let large = count_flops(&ModelConfig { input_size: 128, ..ModelConfig::default() }).unwrap();
    assert_eq!(large.subtotal("backbone"), 4 * small.subtotal("backbone"));
}

#[test]
fn flops_do_not_depend_on_the_loss() {
    let mut s1 = ParamStore::new();
    let a = model_flops(&Detector::new(&mut s1, ModelConfig::default()).unwrap());
    let b = count_flops(&ModelConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut store = ParamStore::new();
    Detector::new(&mut store, tiny_model(HeadKind::DaHead, NeckKind::Bwfpn)).unwrap();
    checkpoint::save(&path, &store, &[("loss.running_mean", 0.25)]).unwrap();

    let mut other = ParamStore::new();
    Detector::new(&mut other, ModelConfig { init_seed: 5, ..tiny_model(HeadKind::DaHead, NeckKind::Bwfpn) }).unwrap();
    let extra = checkpoint::load_into(&path, &mut other).unwrap();
    assert_eq!(extra.len(), 1);
    assert_eq!(extra[0].values, vec![0.25]);
    for ((_, _, a), (_, _, b)) in store.iter().zip(other.iter()) {
        let rounded: Vec<f64> = a.data().iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(b.data(), rounded.as_slice());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 2;
    let bad = dir.path().join("v2.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    let err = checkpoint::load_into(&bad, &mut other).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    bytes[4] = 1;
    bytes[0] = b'X';
    std::fs::write(&bad, &bytes).unwrap();
    assert!(checkpoint::load_into(&bad, &mut other).is_err());

    let mut plain = ParamStore::new();
    Detector::new(&mut plain, tiny_model(HeadKind::Plain, NeckKind::Fpn)).unwrap();
    assert!(checkpoint::load_into(&path, &mut plain).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = Dataset::synthetic(&tiny_scenes(), 0, 4);
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, tiny_model(HeadKind::DaHead, NeckKind::Bwfpn)).unwrap();
    let before = store.clone();
    let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
    let mut opt = Sgd::new(&store);
    let mut state = LossState::new(LossVariant::Wiou3);
    for _ in 0..3 {
        train_step(&model, &mut store, &mut opt, &mut state, &data, &[0, 1, 2, 3], &cfg).unwrap();
    }
    for ((_, _, a), (_, _, b)) in before.iter().zip(store.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let spec = tiny_scenes();
    let train_set = Dataset::synthetic(&spec, 0, 12);
    let val = Dataset::synthetic(&spec, 1000, 4);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let run = || {
        let mut store = ParamStore::new();
        let model = Detector::new(&mut store, tiny_model(HeadKind::DaHead, NeckKind::Bwfpn)).unwrap();
        let mut state = LossState::new(LossVariant::Wiou3);
        let rows = train(&model, &mut store, &mut state, &train_set, &val, &cfg, |_| {}).unwrap();
        (metrics_csv(&rows), store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert!(a.starts_with("epoch,loss,precision,recall,map50,map5095\n1,"));
    for ((_, _, x), (_, _, y)) in sa.iter().zip(sb.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn forward_shapes_follow_the_grid() {
    let cfg = tiny_model(HeadKind::DaHead, NeckKind::Bwfpn);
    let data = Dataset::synthetic(&tiny_scenes(), 0, 2);
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, cfg).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&mut tape, &store);
    let x = ctx.tape.constant(batch_tensor(&data, &[0, 1]).unwrap());
    let maps = model.forward(&mut ctx, x).unwrap();
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| ctx.tape.shape(m).to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 6, 4, 4], vec![2, 6, 2, 2], vec![2, 6, 1, 1]]);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { input_size: 48, ..ModelConfig::default() },
        ModelConfig { num_levels: 1, ..ModelConfig::default() },
        ModelConfig { num_levels: 5, ..ModelConfig::default() },
        ModelConfig { channels: 0, ..ModelConfig::default() },
        ModelConfig { stage_widths: vec![12, 16, 26, 32], ..ModelConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(TrainConfig { nms_iou: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(SceneSpec { min_targets: 3, max_targets: 2, ..SceneSpec::default() }.validate().is_err());
}

#[test]
fn learning_rate_decays_linearly_to_the_final_fraction() {
    let cfg = TrainConfig { epochs: 5, lr: 0.02, lr_final: 0.1, ..TrainConfig::default() };
    let lrs: Vec<f64> = (1..=5).map(|e| cfg.lr_at(e)).collect();
    for (got, want) in lrs.iter().zip([0.02, 0.0155, 0.011, 0.0065, 0.002]) {
        assert!((got - want).abs() < 1e-15, "{lrs:?}");
    }
    let single = TrainConfig { epochs: 1, ..cfg };
    assert_eq!(single.lr_at(1), 0.02);
}

#[test]
fn inverted_box_still_receives_a_widening_gradient() {
    let grids = grids64();
    let labels = vec![vec![gt(0, 12.0, 12.0, 8.0, 8.0)]];
    let mut tape = Tape::new();
    let maps: Vec<_> = grids
        .iter()
        .map(|g| tape.param(Tensor::full(vec![1, 6, g.height, g.width], -6.0)))
        .collect();
    let state = LossState::new(LossVariant::Ciou);
    let lb = train::detection_loss(&mut tape, &maps, &labels, &grids, &state, &TrainConfig::default()).unwrap();
    assert!(lb.liou[0] > 0.999);
    tape.backward(lb.total).unwrap();
    let g = tape.grad(maps[0]).unwrap();
    let (h, w) = (grids[0].height, grids[0].width);
    let cell = w + 1;
    for k in [0, 2] {
        assert!(g[k * h * w + cell] < 0.0, "channel {k}: {}", g[k * h * w + cell]);
    }
}

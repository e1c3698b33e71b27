use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::GradCheck;

fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::from_corners(x1, y1, x2, y2).unwrap()
}

fn loss(variant: LossVariant, pred: &BBox, gt: &BBox) -> f64 {
    loss_value(pred, gt, &LossState::new(variant)).unwrap()
}

fn overlapping_pair() -> (BBox, BBox) {
    (corners(0.0, 0.0, 2.0, 2.0), corners(1.0, 0.0, 3.0, 2.0))
}

fn disjoint_pair() -> (BBox, BBox) {
    (corners(0.0, 0.0, 1.0, 1.0), corners(2.0, 0.0, 3.0, 1.0))
}

/// Concentric boxes with different aspect ratios: pred 2x2 inside gt 4x2.
fn concentric_pair() -> (BBox, BBox) {
    (corners(1.0, 0.0, 3.0, 2.0), corners(0.0, 0.0, 4.0, 2.0))
}

fn geometry(pred: &BBox, gt: &BBox) -> [f64; 6] {
    let mut tape = Tape::new();
    let p = BoxVars::from_boxes(&mut tape, &[*pred], false);
    let g = BoxVars::from_boxes(&mut tape, &[*gt], false);
    let e = iou_geometry(&mut tape, &p, &g).unwrap();
    [e.intersection, e.union, e.iou, e.enclose_w, e.enclose_h, e.center_dist_sq].map(|v| tape.value(v).item())
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    BBox::new(r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0), r.gen_range(0.5..15.0), r.gen_range(0.5..15.0)).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn geometry_examples() {
    let b = corners(0.0, 0.0, 1.0, 1.0);
    assert_eq!(geometry(&b, &b), [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    let (p, g) = disjoint_pair();
    let [inter, union, iou, wg, hg, _] = geometry(&p, &g);
    assert_eq!((inter, union, iou, wg, hg), (0.0, 2.0, 0.0, 3.0, 1.0));
    let (p, g) = overlapping_pair();
    let [inter, union, iou, wg, hg, rho] = geometry(&p, &g);
    assert_eq!((inter, union, wg, hg, rho), (2.0, 6.0, 3.0, 2.0, 1.0));
    assert!(close(iou, 1.0 / 3.0, 1e-15));
}

#[test]
fn box_constructor_rejects_degenerate_sizes() {
    assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
    assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
}

#[test]
fn wiou_v1_hand_case() {
    let (p, g) = overlapping_pair();
    let v = loss(LossVariant::Wiou1, &p, &g);
    assert!(close(v, (1.0f64 / 13.0).exp() * 2.0 / 3.0, 1e-15));
    assert!(close(v, 0.719_972_67, 1e-8), "{v}");
}

#[test]
fn giou_golden() {
    let (p, g) = overlapping_pair();
    assert!(close(loss(LossVariant::Giou, &p, &g), 2.0 / 3.0, 1e-15));
    let (p, g) = disjoint_pair();
    assert!(close(loss(LossVariant::Giou, &p, &g), 4.0 / 3.0, 1e-15));
    let (p, g) = concentric_pair();
    assert!(close(loss(LossVariant::Giou, &p, &g), 0.5, 1e-15));
}

#[test]
fn diou_golden() {
    let (p, g) = overlapping_pair();
    assert!(close(loss(LossVariant::Diou, &p, &g), 2.0 / 3.0 + 1.0 / 13.0, 1e-15));
    let (p, g) = disjoint_pair();
    assert!(close(loss(LossVariant::Diou, &p, &g), 1.4, 1e-15));
    let (p, g) = concentric_pair();
    assert!(close(loss(LossVariant::Diou, &p, &g), 0.5, 1e-15));
}

#[test]
fn ciou_golden() {
    // equal aspect ratios: the consistency term vanishes
    let (p, g) = overlapping_pair();
    assert!(close(loss(LossVariant::Ciou, &p, &g), 2.0 / 3.0 + 1.0 / 13.0, 1e-15));
    let (p, g) = disjoint_pair();
    assert!(close(loss(LossVariant::Ciou, &p, &g), 1.4, 1e-15));
    let (p, g) = concentric_pair();
    let v = 4.0 / (PI * PI) * (2.0f64.atan() - 1.0f64.atan()).powi(2);
    let alpha = v / (0.5 + v + 1e-7);
    assert!(close(loss(LossVariant::Ciou, &p, &g), 0.5 + alpha * v, 1e-15));
}

#[test]
fn eiou_golden() {
    let (p, g) = overlapping_pair();
    assert!(close(loss(LossVariant::Eiou, &p, &g), 2.0 / 3.0 + 1.0 / 13.0, 1e-15));
    let (p, g) = disjoint_pair();
    assert!(close(loss(LossVariant::Eiou, &p, &g), 1.4, 1e-15));
    // width gap 2 over enclosure width 4
    let (p, g) = concentric_pair();
    assert!(close(loss(LossVariant::Eiou, &p, &g), 0.75, 1e-15));
}

#[test]
fn siou_golden() {
    // horizontal displacement: zero angle cost, distance term 1 - exp(-2 (dx/W_g)^2)
    let (p, g) = overlapping_pair();
    let want = 2.0 / 3.0 + 0.5 * (1.0 - (-2.0f64 / 9.0).exp());
    assert!(close(loss(LossVariant::Siou, &p, &g), want, 1e-12));
    let (p, g) = disjoint_pair();
    let want = 1.0 + 0.5 * (1.0 - (-8.0f64 / 9.0).exp());
    assert!(close(loss(LossVariant::Siou, &p, &g), want, 1e-12));
    // concentric: only the width shape term, omega = 2/4
    let (p, g) = concentric_pair();
    let want = 0.5 + 0.5 * (1.0 - (-0.5f64).exp()).powi(4);
    assert!(close(loss(LossVariant::Siou, &p, &g), want, 1e-12));
}

#[test]
fn siou_diagonal_offset_has_maximal_angle_cost() {
    // 45 degree displacement: angle cost 1, so gamma = -1
    let g = corners(0.0, 0.0, 2.0, 2.0);
    let p = corners(1.0, 1.0, 3.0, 3.0);
    let want = 1.0 - 1.0 / 7.0 + 0.5 * 2.0 * (1.0 - (-1.0f64 / 9.0).exp());
    assert!(close(loss(LossVariant::Siou, &p, &g), want, 1e-12));
}

#[test]
fn wiou_v2_and_v3_scale_v1() {
    let (p, g) = overlapping_pair();
    let v1 = loss(LossVariant::Wiou1, &p, &g);
    let mut s2 = LossState::new(LossVariant::Wiou2);
    s2.running_mean = 0.5;
    let v2 = loss_value(&p, &g, &s2).unwrap();
    assert!(close(v2, (4.0f64 / 3.0).sqrt() * v1, 1e-15));
    let mut s3 = LossState::new(LossVariant::Wiou3);
    s3.running_mean = 2.0 / 9.0;
    // beta = 3 = delta, gain exactly 1
    let v3 = loss_value(&p, &g, &s3).unwrap();
    assert!(close(v3, v1, 1e-15));
}

#[test]
fn gain_is_one_at_delta() {
    assert_eq!(wiou_gain(3.0, 1.9, 3.0), 1.0);
    assert_eq!(wiou_gain(0.0, 1.9, 3.0), 0.0);
    let (a, b) = (wiou_gain(2.0 - 1e-9, 1.9, 3.0), wiou_gain(2.0 + 1e-9, 1.9, 3.0));
    assert!((a - b).abs() < 1e-8);
}

#[test]
fn every_variant_is_zero_at_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = random_box(&mut r);
        for v in LossVariant::ALL {
            let l = loss(v, &b, &b);
            assert!(l.abs() <= 1e-12, "{v}: {l}");
        }
    }
}

#[test]
fn unknown_variant_rejected() {
    assert!("wiou4".parse::<LossVariant>().is_err());
    assert_eq!("WIoU3".parse::<LossVariant>().unwrap(), LossVariant::Wiou3);
}

#[test]
fn update_state_examples() {
    let mut s = LossState::new(LossVariant::Wiou3);
    s.momentum = 0.1;
    s.update_state(&[0.25, 0.75]).unwrap();
    assert!(close(s.running_mean, 0.95, 1e-15));

    let mut frozen = LossState::new(LossVariant::Wiou3);
    frozen.momentum = 0.0;
    frozen.update_state(&[0.3]).unwrap();
    assert_eq!(frozen.running_mean, 1.0);

    let mut s = LossState::new(LossVariant::Wiou3);
    s.momentum = 0.2;
    let mut prev = s.running_mean;
    for _ in 0..200 {
        s.update_state(&[0.4, 0.4]).unwrap();
        assert!(s.running_mean <= prev && s.running_mean >= 0.4);
        prev = s.running_mean;
    }
    assert!(close(s.running_mean, 0.4, 1e-12));

    let mut e = LossState::new(LossVariant::Wiou3).eval();
    assert!(e.update_state(&[0.5]).is_err());
    assert_eq!(e.running_mean, 1.0);
}

#[test]
fn oracle_examples() {
    let b = corners(0.0, 0.0, 1.0, 1.0);
    assert_eq!(rasterized_iou_oracle(&b, &b, 1), 1.0);
    let (p, g) = overlapping_pair();
    assert_eq!(rasterized_iou_oracle(&p, &g, 1), 1.0 / 3.0);
    let (p, g) = disjoint_pair();
    assert_eq!(rasterized_iou_oracle(&p, &g, 1), 0.0);
}

#[test]
fn analytic_iou_matches_raster_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let grid = 2u32;
    for _ in 0..1000 {
        let mut pick = || {
            let x1 = r.gen_range(-16..16) as f64 / grid as f64;
            let y1 = r.gen_range(-16..16) as f64 / grid as f64;
            let w = r.gen_range(1..20) as f64 / grid as f64;
            let h = r.gen_range(1..20) as f64 / grid as f64;
            corners(x1, y1, x1 + w, y1 + h)
        };
        let (p, g) = (pick(), pick());
        let analytic = geometry(&p, &g)[2];
        let raster = rasterized_iou_oracle(&p, &g, grid);
        assert!(close(analytic, raster, 1e-9), "{p:?} {g:?}: {analytic} vs {raster}");
    }
}

/// Wise-IoU v1 without the detachment, to show the detachment matters.
fn wiou1_attached(tape: &mut Tape, p: &BoxVars, g: &BoxVars) -> Var {
    let e = iou_geometry(tape, p, g).unwrap();
    let w2 = tape.square(e.enclose_w);
    let h2 = tape.square(e.enclose_h);
    let d = tape.add(w2, h2).unwrap();
    let ratio = tape.div(e.center_dist_sq, d).unwrap();
    let r = tape.exp(ratio);
    let n = tape.neg(e.iou);
    let l = tape.add_scalar(n, 1.0);
    tape.mul(r, l).unwrap()
}

#[test]
fn enclosure_denominator_is_detached() {
    let (p, g) = overlapping_pair();
    let p = p.translated(0.3, 0.2);

    let mut tape = Tape::new();
    let pv = BoxVars::from_boxes(&mut tape, &[p], true);
    let gv = BoxVars::from_boxes(&mut tape, &[g], false);
    let l = box_loss(&mut tape, &pv, &gv, &LossState::new(LossVariant::Wiou1)).unwrap();
    let s = tape.sum_all(l.per_box);
    tape.backward(s).unwrap();
    let detached = [pv.cx, pv.cy, pv.w, pv.h].map(|v| tape.grad(v).unwrap()[0]);

    let mut tape = Tape::new();
    let pv = BoxVars::from_boxes(&mut tape, &[p], true);
    let gv = BoxVars::from_boxes(&mut tape, &[g], false);
    let l = wiou1_attached(&mut tape, &pv, &gv);
    let s = tape.sum_all(l);
    tape.backward(s).unwrap();
    let attached = [pv.cx, pv.cy, pv.w, pv.h].map(|v| tape.grad(v).unwrap()[0]);
    let gap = detached.iter().zip(&attached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-3, "detachment had no effect: {detached:?} vs {attached:?}");

    // central differences of the function with W_g^2 + H_g^2 frozen at the base point
    let [_, _, _, wg, hg, _] = geometry(&p, &g);
    let frozen = wg * wg + hg * hg;
    let f = |q: &BBox| {
        let rho = (q.cx - g.cx).powi(2) + (q.cy - g.cy).powi(2);
        (rho / frozen).exp() * (1.0 - q.iou(&g))
    };
    let eps = 1e-6;
    let shifted = |k: usize, d: f64| {
        let mut v = [p.cx, p.cy, p.w, p.h];
        v[k] += d;
        BBox::new(v[0], v[1], v[2], v[3]).unwrap()
    };
    for (k, &a) in detached.iter().enumerate() {
        let n = (f(&shifted(k, eps)) - f(&shifted(k, -eps))) / (2.0 * eps);
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-6, "coord {k}: {a} vs {n}");
    }
}

fn split(tape: &mut Tape, x: Var) -> Result<BoxVars> {
    Ok(BoxVars {
        cx: tape.narrow(x, 0, 0, 1)?,
        cy: tape.narrow(x, 0, 1, 1)?,
        w: tape.narrow(x, 0, 2, 1)?,
        h: tape.narrow(x, 0, 3, 1)?,
    })
}

#[test]
fn gradients_match_finite_differences_with_detached_terms_held() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for variant in LossVariant::ALL {
        let mut state = LossState::new(variant);
        state.running_mean = 0.6;
        let mut checked = 0;
        while checked < 5 {
            let g = random_box(&mut r);
            let p = BBox::new(
                g.cx + r.gen_range(-4.0..4.0),
                g.cy + r.gen_range(-4.0..4.0),
                g.w * r.gen_range(0.6..1.6),
                g.h * r.gen_range(0.6..1.6),
            )
            .unwrap();
            let mut tape = Tape::new();
            let pv = BoxVars::from_boxes(&mut tape, &[p], false);
            let gv = BoxVars::from_boxes(&mut tape, &[g], false);
            let held = box_loss(&mut tape, &pv, &gv, &state).unwrap().detached;
            let gt = Tensor::from_vec(vec![g.cx, g.cy, g.w, g.h]);
            let report = GradCheck::new(1e-5, 1e-4)
                .run(
                    |tape, v| {
                        let pv = split(tape, v[0])?;
                        let gt = tape.constant(gt.clone());
                        let gv = split(tape, gt)?;
                        let l = box_loss_with(tape, &pv, &gv, &state, Some(&held))?;
                        Ok(tape.sum_all(l.per_box))
                    },
                    &[Tensor::from_vec(vec![p.cx, p.cy, p.w, p.h])],
                )
                .unwrap();
            if report.kink_margin <= 1e-4 {
                continue;
            }
            assert!(report.passed(), "{variant}: {report:?}");
            checked += 1;
        }
    }
}

#[test]
fn focusing_factors_are_constants_in_the_graph() {
    // with the factor frozen the v3 gradient is the v1 gradient times the gain
    let (p, g) = overlapping_pair();
    let p = p.translated(0.2, -0.1);
    let grad = |state: &LossState| {
        let mut tape = Tape::new();
        let pv = BoxVars::from_boxes(&mut tape, &[p], true);
        let gv = BoxVars::from_boxes(&mut tape, &[g], false);
        let l = box_loss(&mut tape, &pv, &gv, state).unwrap();
        let s = tape.sum_all(l.per_box);
        tape.backward(s).unwrap();
        ([pv.cx, pv.cy, pv.w, pv.h].map(|v| tape.grad(v).unwrap()[0]), l.liou[0])
    };
    let (g1, liou) = grad(&LossState::new(LossVariant::Wiou1));
    let mut s3 = LossState::new(LossVariant::Wiou3);
    s3.running_mean = 0.4;
    let (g3, _) = grad(&s3);
    let gain = wiou_gain(liou / 0.4, 1.9, 3.0);
    for (a, b) in g1.iter().zip(&g3) {
        assert!(close(a * gain, *b, 1e-12));
    }
    let mut s2 = LossState::new(LossVariant::Wiou2);
    s2.running_mean = 0.4;
    let (g2, _) = grad(&s2);
    let f = (liou / 0.4).sqrt();
    for (a, b) in g1.iter().zip(&g2) {
        assert!(close(a * f, *b, 1e-12));
    }
}

#[test]
fn ciou_alpha_is_held_constant() {
    let (p, g) = concentric_pair();
    let p = p.translated(0.3, 0.1);
    let mut tape = Tape::new();
    let pv = BoxVars::from_boxes(&mut tape, &[p], true);
    let gv = BoxVars::from_boxes(&mut tape, &[g], false);
    let l = box_loss(&mut tape, &pv, &gv, &LossState::new(LossVariant::Ciou)).unwrap();
    let s = tape.sum_all(l.per_box);
    tape.backward(s).unwrap();
    let analytic = tape.grad(pv.w).unwrap()[0];

    let v_of = |b: &BBox| 4.0 / (PI * PI) * ((g.w / g.h).atan() - (b.w / b.h).atan()).powi(2);
    let v0 = v_of(&p);
    let alpha = v0 / (1.0 - p.iou(&g) + v0 + 1e-7);
    let f = |b: &BBox| {
        let [_, _, _, wg, hg, rho] = geometry(b, &g);
        1.0 - b.iou(&g) + rho / (wg * wg + hg * hg) + alpha * v_of(b)
    };
    let eps = 1e-6;
    let plus = BBox { w: p.w + eps, ..p };
    let minus = BBox { w: p.w - eps, ..p };
    let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
    assert!((analytic - numeric).abs() < 1e-7, "{analytic} vs {numeric}");
}

#[test]
fn liou_is_reported_per_box() {
    let (p1, g1) = overlapping_pair();
    let (p2, g2) = disjoint_pair();
    let mut tape = Tape::new();
    let pv = BoxVars::from_boxes(&mut tape, &[p1, p2], false);
    let gv = BoxVars::from_boxes(&mut tape, &[g1, g2], false);
    let l = box_loss(&mut tape, &pv, &gv, &LossState::new(LossVariant::Wiou3)).unwrap();
    assert_eq!(l.liou.len(), 2);
    assert!(close(l.liou[0], 2.0 / 3.0, 1e-15));
    assert_eq!(l.liou[1], 1.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-30.0f64..30.0, -30.0f64..30.0, 0.5f64..20.0, 0.5f64..20.0).prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn wiou1_dominates_iou(p in arb_box(), g in arb_box()) {
            let l1 = loss(LossVariant::Wiou1, &p, &g);
            let l0 = loss(LossVariant::Iou, &p, &g);
            prop_assert!(l1 >= l0 - 1e-12);
            let same_center = BBox { cx: g.cx, cy: g.cy, ..p };
            let a = loss(LossVariant::Wiou1, &same_center, &g);
            let b = loss(LossVariant::Iou, &same_center, &g);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn translation_invariance(p in arb_box(), g in arb_box(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            for v in LossVariant::ALL {
                let a = loss(v, &p, &g);
                let b = loss(v, &p.translated(dx, dy), &g.translated(dx, dy));
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {} vs {}", v, a, b);
            }
        }

        #[test]
        fn scale_invariance(p in arb_box(), g in arb_box(), k in 0.25f64..4.0) {
            for v in LossVariant::ALL {
                let a = loss(v, &p, &g);
                let b = loss(v, &p.scaled(k), &g.scaled(k));
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {} vs {}", v, a, b);
            }
        }
    }
}

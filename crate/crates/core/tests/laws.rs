//! Randomized laws of pooling, gating, fields, metrics and losses.

use proptest::prelude::*;
use wsrpn::autodiff::{Graph, Tensor};
use wsrpn::config::SelfPairing;
use wsrpn::losses::{consistency_loss, supcon_loss};
use wsrpn::metrics::{average_precision, iou, BBox, Detection, GroundTruthBox};
use wsrpn::patch::{classify_with_nofinding, lse_pool};
use wsrpn::roi::{noisy_pool, receptive_field, NoisyMode};

fn lse(v: &[f64], r: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
    let y = lse_pool(&mut g, x, 1, r).unwrap();
    g.value(y).data()[0]
}

fn noisy(v: &[f64], mode: NoisyMode) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
    let y = noisy_pool(&mut g, x, 1, mode).unwrap();
    g.value(y).data()[0]
}

fn field(mu: [f64; 2], sigma: [f64; 2], side: usize, beta: f64) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::from_f64(&[1, 1, 2], &mu).unwrap());
    let s = g.constant(Tensor::from_f64(&[1, 1, 2], &sigma).unwrap());
    let a = receptive_field(&mut g, m, s, side, side, beta).unwrap();
    g.value(a).data().to_vec()
}

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..12)
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.8, 0.01f64..0.8)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

const TOL: f64 = 1e-10;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lse_between_mean_and_max(v in prop::collection::vec(-3.0f64..3.0, 1..20), r in 0.05f64..50.0) {
        let y = lse(&v, r);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y >= mean - TOL && y <= max + TOL, "{mean} <= {y} <= {max}");
    }

    #[test]
    fn lse_monotone_in_r_and_inputs(
        v in prop::collection::vec(-3.0f64..3.0, 1..20),
        r in 0.05f64..20.0,
        dr in 0.0f64..20.0,
        i in any::<prop::sample::Index>(),
        dv in 0.0f64..2.0,
    ) {
        prop_assert!(lse(&v, r) <= lse(&v, r + dr) + TOL);
        let mut w = v.clone();
        w[i.index(v.len())] += dv;
        prop_assert!(lse(&v, r) <= lse(&w, r) + TOL);
    }

    #[test]
    fn noisy_duality_and_absorbing(v in probs(), i in any::<prop::sample::Index>()) {
        let inv: Vec<f64> = v.iter().map(|p| 1.0 - p).collect();
        prop_assert!((noisy(&v, NoisyMode::Or) - (1.0 - noisy(&inv, NoisyMode::And))).abs() <= TOL);
        let k = i.index(v.len());
        let mut one = v.clone();
        one[k] = 1.0;
        prop_assert!((noisy(&one, NoisyMode::Or) - 1.0).abs() <= TOL);
        let mut zero = v.clone();
        zero[k] = 0.0;
        prop_assert!(noisy(&zero, NoisyMode::And).abs() <= TOL);
        let or = noisy(&v, NoisyMode::Or);
        let and = noisy(&v, NoisyMode::And);
        let max = v.iter().cloned().fold(0.0, f64::max);
        let min = v.iter().cloned().fold(1.0, f64::min);
        prop_assert!(or >= max - TOL && and <= min + TOL);
    }

    #[test]
    fn gating_never_exceeds_the_gate(l in prop::collection::vec(-30.0f64..30.0, 2..8)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, l.len()], &l).unwrap());
        let p = classify_with_nofinding(&mut g, x).unwrap();
        let p = g.value(p).data().to_vec();
        let nf = *p.last().unwrap();
        for &pc in &p[..p.len() - 1] {
            prop_assert!(pc >= 0.0 && pc <= 1.0 - nf + TOL);
        }
    }

    #[test]
    fn field_peaks_at_mu(
        mx in 0.0f64..1.0, my in 0.0f64..1.0,
        sx in 0.02f64..0.5, sy in 0.02f64..0.5,
        side in 2usize..9,
        beta in prop::sample::select(vec![2.0, 3.0, 4.0, 5.0]),
    ) {
        let a = field([mx, my], [sx, sy], side, beta);
        // value 1 when μ sits on a patch center
        let cx = ((mx * side as f64).floor().min(side as f64 - 1.0) + 0.5) / side as f64;
        let cy = ((my * side as f64).floor().min(side as f64 - 1.0) + 0.5) / side as f64;
        let at_center = field([cx, cy], [sx, sy], side, beta);
        prop_assert!((at_center.iter().cloned().fold(0.0, f64::max) - 1.0).abs() <= TOL);
        // the maximum sits on the patch containing μ
        let (col, row) = ((cx * side as f64) as usize, (cy * side as f64) as usize);
        let peak = a[row * side + col];
        for &v in &a {
            prop_assert!(v <= peak + TOL && v <= 1.0 + TOL && v >= 0.0);
        }
    }

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((x - y).abs() <= 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bernoulli_kl_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 6), q in prop::collection::vec(0.0f64..=1.0, 6)) {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::from_f64(&[1, 2, 3], &p).unwrap());
        let qv = g.constant(Tensor::from_f64(&[1, 2, 3], &q).unwrap());
        let kl = consistency_loss(&mut g, pv, qv).unwrap();
        prop_assert!(g.value(kl).data()[0] >= -TOL);
        let self_kl = consistency_loss(&mut g, pv, pv).unwrap();
        prop_assert!(g.value(self_kl).data()[0].abs() <= TOL);
    }
}

fn gt(class: usize, b: BBox) -> GroundTruthBox {
    GroundTruthBox { class, bbox: b }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// AP depends on the score ranking only.
    #[test]
    fn ap_invariant_to_monotone_rescoring(
        boxes in prop::collection::vec((bbox(), 0.0f64..1.0, 0usize..2), 1..8),
        truth in prop::collection::vec((bbox(), 0usize..2), 1..4),
        thr in 0.1f64..0.7,
    ) {
        let dets: Vec<Detection> = boxes.iter().enumerate()
            .map(|(t, &(b, s, c))| Detection { class: c, score: s, bbox: b, token: t })
            .collect();
        let gts: Vec<GroundTruthBox> = truth.iter().map(|&(b, c)| gt(c, b)).collect();
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
        let a = average_precision(&[dets], &[gts.clone()], 2, thr).unwrap();
        let b = average_precision(&[squashed], &[gts], 2, thr).unwrap();
        prop_assert!((a.map - b.map).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.map));
    }

    #[test]
    fn supcon_invariances(
        feats in prop::collection::vec(-2.0f64..2.0, 4 * 2 * 3),
        labels in prop::collection::vec(prop::collection::vec(any::<bool>(), 2), 4),
        scale in 0.1f64..10.0,
        perm in Just(vec![2usize, 0, 3, 1]),
    ) {
        let run = |f: &[f64], l: &[Vec<bool>], pairing| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[4, 2, 3], f).unwrap());
            let y = supcon_loss(&mut g, x, l, 0.1, pairing).unwrap();
            g.value(y).data()[0]
        };
        for pairing in [SelfPairing::Exclude, SelfPairing::Include] {
            let base = run(&feats, &labels, pairing);
            let scaled: Vec<f64> = feats.iter().map(|v| v * scale).collect();
            prop_assert!((base - run(&scaled, &labels, pairing)).abs() <= 1e-9);
            let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 6..(i + 1) * 6].to_vec()).collect();
            let pl: Vec<Vec<bool>> = perm.iter().map(|&i| labels[i].clone()).collect();
            prop_assert!((base - run(&pf, &pl, pairing)).abs() <= 1e-9);
        }
    }
}

use proptest::prelude::*;

use dahar::data::{crop_box, five_crop_eval, generate_scene, resize_chw, AugmentConfig, CropPosition, SceneSpec};
use dahar::harness::TrainConfig;
use dahar::losses::{bce_loss, weighted_bce_loss, AttributeLabels, Label, OmegaVector};
use dahar::metrics::{average_precision, instance_metrics, ScoreMatrix};
use dahar::tensor::{Graph, Tensor};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Positive), Just(Label::Negative), Just(Label::Unknown)]
}

fn column(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(label(), n)))
}

proptest! {
    #[test]
    fn ap_is_a_probability((scores, labels) in column(12)) {
        if let Some(ap) = average_precision(&scores, &labels) {
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(labels.contains(&Label::Positive));
        } else {
            prop_assert!(!labels.contains(&Label::Positive));
        }
    }

    #[test]
    fn ap_ignores_monotone_rescaling((scores, labels) in column(12)) {
        let squashed: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s - 1.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&squashed, &labels));
    }

    #[test]
    fn separated_scores_give_perfect_ap((scores, labels) in column(12)) {
        let sorted: Vec<f64> = labels.iter().zip(&scores).map(|(l, s)| if *l == Label::Positive { 2.0 + s } else { *s }).collect();
        if labels.contains(&Label::Positive) {
            prop_assert_eq!(average_precision(&sorted, &labels), Some(1.0));
        }
    }

    #[test]
    fn unknowns_do_not_change_ap((scores, labels) in column(12), noise in prop::collection::vec(0.0f64..1.0, 12)) {
        let mut s2 = scores.clone();
        for (i, l) in labels.iter().enumerate() {
            if *l == Label::Unknown {
                s2[i] = noise[i];
            }
        }
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&s2, &labels));
    }

    #[test]
    fn instance_metrics_are_bounded(b in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 11) as f64 / (1u64 << 53) as f64 };
        let scores: Vec<f64> = (0..b * c).map(|_| next()).collect();
        let labels: Vec<AttributeLabels> = (0..b)
            .map(|_| AttributeLabels((0..c).map(|_| match (next() * 3.0) as u8 { 0 => Label::Positive, 1 => Label::Negative, _ => Label::Unknown }).collect()))
            .collect();
        let m = ScoreMatrix::new(scores, labels).unwrap();
        let r = instance_metrics(&m, 0.5);
        for v in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.accuracy <= r.precision.min(r.recall) + 1e-12);
    }

    #[test]
    fn labels_round_trip_through_text(bits in prop::collection::vec(label(), 1..14)) {
        let l = AttributeLabels(bits);
        prop_assert_eq!(l.to_string().parse::<AttributeLabels>().unwrap(), l);
    }

    #[test]
    fn balanced_weighting_equals_plain_bce(logits in prop::collection::vec(-8.0f64..8.0, 6), bits in prop::collection::vec(label(), 6), ignore: bool) {
        let labels = vec![AttributeLabels(bits[..3].to_vec()), AttributeLabels(bits[3..].to_vec())];
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2, 3], logits).unwrap());
        let plain = bce_loss(&mut g, x, &labels, ignore).unwrap().loss;
        let weighted = weighted_bce_loss(&mut g, x, &labels, &OmegaVector::balanced(3), ignore).unwrap().loss;
        prop_assert!((g.scalar(plain) - g.scalar(weighted)).abs() < 1e-9);
        prop_assert!(g.scalar(plain) >= 0.0);
    }

    #[test]
    fn crop_boxes_stay_inside(h in 1usize..80, w in 1usize..80, ch in 1usize..80, cw in 1usize..80) {
        let (ch, cw) = (ch.min(h), cw.min(w));
        for pos in CropPosition::ALL {
            let (y, x, bh, bw) = crop_box((h, w), (ch, cw), pos);
            prop_assert_eq!((bh, bw), (ch, cw));
            prop_assert!(y + bh <= h && x + bw <= w);
        }
    }

    #[test]
    fn resizing_keeps_constants_and_bounds(h in 1usize..20, w in 1usize..20, oh in 1usize..30, ow in 1usize..30, v in 0.0f32..1.0) {
        let t = Tensor::full(&[2, h, w], v);
        let r = resize_chw(&t, oh, ow);
        prop_assert_eq!(r.shape(), &[2, oh, ow]);
        prop_assert!(r.data().iter().all(|&x| (x - v).abs() < 1e-6));
        let ramp = Tensor::from_fn(&[1, h, w], |i| i as f32 / (h * w) as f32);
        let r = resize_chw(&ramp, oh, ow);
        prop_assert!(r.data().iter().all(|&x| (-1e-6..=1.0).contains(&x)));
        prop_assert_eq!(resize_chw(&ramp, h, w), ramp);
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing(epochs in 1usize..60, lr in 1e-4f64..1.0) {
        let mut cfg = TrainConfig::toy(8);
        cfg.epochs = epochs;
        cfg.lr = lr;
        let lrs: Vec<f64> = (0..epochs).map(|e| cfg.lr_at(e)).collect();
        prop_assert_eq!(lrs[0], lr);
        prop_assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
        let changes = lrs.windows(2).filter(|p| p[1] != p[0]).count();
        prop_assert!(changes <= cfg.milestones().len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_reproducible_and_quantized(seed in any::<u64>(), attrs in 1usize..=14) {
        let spec = SceneSpec::benchmark(attrs);
        let a = generate_scene(&spec, seed).unwrap();
        let b = generate_scene(&spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.labels.len(), attrs);
        prop_assert!(a.image.data().iter().all(|&v| (v * 255.0).round() / 255.0 == v && v.is_sign_positive()));
        prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.mask.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn five_crops_of_a_constant_image_agree(v in 0.0f32..1.0) {
        let img = Tensor::full(&[3, 73, 73], v);
        let crops = five_crop_eval(&img, &AugmentConfig::toy());
        for c in &crops[1..] {
            prop_assert_eq!(c, &crops[0]);
        }
    }
}

use chexfusion::baselines::{weighted_average_predict, WeightedAvgConfig};
use chexfusion::data::{format_labels, make_batches, parse_labels, LabelValue};
use chexfusion::losses::{loss_and_grad, LossConfig, LossMode, Target};
use chexfusion::metrics::{auroc, average_precision};
use chexfusion::model::{checkpoint_bytes, load_checkpoint_bytes, Dtype, ViewLabel};
use chexfusion::tensor::{ParamStore, StreamKey, Tape, Tensor};
use proptest::prelude::*;

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![-3.0f64..3.0, Just(0.5), Just(-1.0)], n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

fn label_value() -> impl Strategy<Value = LabelValue> {
    prop_oneof![
        Just(LabelValue::Positive),
        Just(LabelValue::Negative),
        Just(LabelValue::Uncertain),
        Just(LabelValue::Unmentioned),
        (0.0f64..=1.0).prop_map(|p| LabelValue::soft(p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_and_auroc_bounded((s, l) in scores_and_labels()) {
        if let Some(ap) = average_precision(&s, &l) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        if let Some(a) = auroc(&s, &l) {
            prop_assert!((0.0..=1.0).contains(&a));
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_transform_keeps_metrics((s, l) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|x| (2.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(average_precision(&s, &l), average_precision(&t, &l));
        prop_assert_eq!(auroc(&s, &l), auroc(&t, &l));
    }

    #[test]
    fn losses_nonnegative_and_mask_exact(
        p in prop::collection::vec(1e-6f64..1.0 - 1e-6, 1..8),
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let c = p.len();
        let mut rng = StreamKey::new(seed, "prop.loss", 0).rng();
        let y: Vec<u8> = (0..c).map(|_| rng.random_bool(0.5) as u8).collect();
        let rho: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        for mode in [LossMode::Bce, LossMode::Wbce, LossMode::Asl, LossMode::Combined] {
            let cfg = LossConfig::new(rho.clone()).with_mode(mode);
            let mut t = Target::hard(&y);
            let (full, _) = loss_and_grad(&p, &t, &cfg).unwrap();
            prop_assert!(full >= 0.0);
            t.mask[0] = false;
            let (masked, g) = loss_and_grad(&p, &t, &cfg).unwrap();
            prop_assert_eq!(g[0], 0.0);
            let mut q = p.clone();
            q[0] = 0.5;
            prop_assert_eq!(masked, loss_and_grad(&q, &t, &cfg).unwrap().0);
        }
    }

    #[test]
    fn asl_without_focusing_is_bce(p in prop::collection::vec(1e-6f64..1.0 - 1e-6, 1..8), bits in any::<u8>()) {
        let y: Vec<u8> = (0..p.len()).map(|i| (bits >> i) & 1).collect();
        let t = Target::hard(&y);
        let rho = vec![0.3; p.len()];
        let asl = LossConfig { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0, ..LossConfig::new(rho.clone()).with_mode(LossMode::Asl) };
        let bce = LossConfig::new(rho).with_mode(LossMode::Bce);
        let a = loss_and_grad(&p, &t, &asl).unwrap().0;
        let b = loss_and_grad(&p, &t, &bce).unwrap().0;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn weighted_average_is_linear(
        probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..5),
        lateral in prop::collection::vec(any::<bool>(), 5),
        wf in 0.0f64..1.0,
        k in 0.1f64..2.0,
    ) {
        let views: Vec<ViewLabel> = (0..probs.len())
            .map(|i| if lateral[i] { ViewLabel::Lateral } else { ViewLabel::Frontal })
            .collect();
        let cfg = WeightedAvgConfig::new(wf).unwrap();
        let base = weighted_average_predict(&probs, &views, &cfg).unwrap();
        let scaled: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|x| x * k).collect()).collect();
        let out = weighted_average_predict(&scaled, &views, &cfg).unwrap();
        for (a, b) in base.iter().zip(&out) {
            prop_assert!((a * k - b).abs() < 1e-12);
        }
        let lo = probs.iter().flatten().cloned().fold(f64::MAX, f64::min);
        let hi = probs.iter().flatten().cloned().fold(f64::MIN, f64::max);
        prop_assert!(base.iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
    }

    #[test]
    fn label_tokens_round_trip(labels in prop::collection::vec(label_value(), 1..10)) {
        let text = format_labels(&labels);
        prop_assert_eq!(parse_labels(&text).unwrap(), labels);
    }

    #[test]
    fn batches_partition_studies(
        counts in prop::collection::vec(1usize..7, 1..40),
        batch in 1usize..9,
        seed in any::<u64>(),
    ) {
        let batches = make_batches(&counts, batch, 4, StreamKey::new(seed, "prop.batches", 0)).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.studies.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..counts.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.studies.len() <= batch);
            for (s, v) in b.studies.iter().zip(&b.views) {
                prop_assert_eq!(v.len(), counts[*s].min(4));
                prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn softmax_and_layer_norm_rows(rows in 1usize..5, cols in 2usize..7, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = StreamKey::new(seed, "prop.rows", 0).rng();
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-20.0..20.0));
        let tape = Tape::no_grad();
        let v = tape.constant(x);
        let s = tape.value(tape.softmax(v).unwrap());
        let n = tape.value(tape.layer_norm(v, 1e-5).unwrap());
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let m: f64 = n.data()[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL, 1..20), split in 0usize..20) {
        let split = split.min(values.len());
        let mut store = ParamStore::new();
        store.insert("b.second", Tensor::from_vec(values[split..].to_vec()), true).unwrap();
        store.insert("a.first", Tensor::from_vec(values[..split].to_vec()), false).unwrap();
        let bytes = checkpoint_bytes(&store, Dtype::F64);
        let back = load_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(back.names().collect::<Vec<_>>(), vec!["a.first", "b.second"]);
        prop_assert_eq!(back.value("a.first").unwrap(), store.value("a.first").unwrap());
        prop_assert_eq!(back.value("b.second").unwrap(), store.value("b.second").unwrap());
        prop_assert_eq!(checkpoint_bytes(&back, Dtype::F64), bytes);
    }
}

mod support;

use fundus_ssl_core::data::{decode_checkpoint, encode_checkpoint, resize_bilinear, split, Image, Mask};
use fundus_ssl_core::eval::{auprc, grid_threshold, paired_tci, pooled_dice, pr_curve, select_threshold, Sided};
use fundus_ssl_core::moco::{momentum_update, KeyQueue};
use fundus_ssl_core::train::{cosine_lr, ScheduleConfig};
use fundus_ssl_core::{ModelParams, ParamKind, RngStream, Tensor};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bitwise(ts in prop::collection::vec(tensor(), 0..5)) {
        let named: Vec<(String, Tensor)> = ts.into_iter().enumerate().map(|(i, t)| (format!("t{i}.w"), t)).collect();
        let bytes = encode_checkpoint(&named).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((n1, a), (n2, b)) in back.iter().zip(&named) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let t = vec![("w".to_string(), Tensor::full(&[3, 2], 0.25))];
        let mut bytes = encode_checkpoint(&t).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn queue_matches_fifo_oracle(cap in 1usize..24, dim in 1usize..4, batches in prop::collection::vec(1usize..24, 0..12)) {
        let mut q = KeyQueue::new(cap, dim).unwrap();
        let mut oracle = support::FifoOracle::new(cap);
        let mut total = 0;
        for (i, b) in batches.into_iter().enumerate() {
            let keys: Vec<f32> = (0..b * dim).map(|j| (i * 1000 + j) as f32).collect();
            if b > cap {
                prop_assert!(q.enqueue(&keys).is_err());
                continue;
            }
            q.enqueue(&keys).unwrap();
            oracle.push_batch(&keys, dim);
            total += b;
            prop_assert_eq!(q.fifo_rows(), oracle.flat());
            prop_assert_eq!(q.len(), total.min(cap));
            prop_assert_eq!(q.ptr(), total % cap);
        }
    }

    #[test]
    fn momentum_update_is_a_convex_combination(a in -10.0f32..10.0, b in -10.0f32..10.0, alpha in 0.0f32..=1.0) {
        let mut m = ModelParams::new();
        m.add("w", ParamKind::Trainable, Tensor::full(&[2], a));
        m.add("running_mean", ParamKind::Buffer, Tensor::full(&[1], a));
        let mut e = ModelParams::new();
        e.add("w", ParamKind::Trainable, Tensor::full(&[2], b));
        e.add("running_mean", ParamKind::Buffer, Tensor::full(&[1], b));
        momentum_update(&mut m, &e, alpha, "").unwrap();
        let v = m.value(0).data()[0];
        prop_assert!(v >= a.min(b) - 1e-5 && v <= a.max(b) + 1e-5);
        prop_assert_eq!(m.value(1).data()[0], b);
    }

    #[test]
    fn dice_matches_oracle_and_is_bounded(seed in any::<u64>(), t in 0.0f64..1.0) {
        let items = support::random_items(&mut RngStream::new(seed));
        let d = pooled_dice(&items, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, support::dice(&items, t));
    }

    #[test]
    fn selected_threshold_is_a_grid_maximum(seed in any::<u64>()) {
        let items = support::random_items(&mut RngStream::new(seed));
        if let Ok(t) = select_threshold(&items) {
            let at = support::dice(&items, t);
            for i in 0..=100 {
                prop_assert!(support::dice(&items, grid_threshold(i)) <= at);
            }
        }
    }

    #[test]
    fn pr_curve_is_monotone_in_recall(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = RngStream::new(seed);
        let scores = support::random_scores(n, &mut rng);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
        labels[0] = 1;
        let c = pr_curve(&scores, &labels).unwrap();
        prop_assert!(c.recall.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.thresholds.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(*c.recall.last().unwrap(), 1.0);
        let ap = auprc(&c);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        prop_assert!((ap - support::average_precision(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded_and_periodic(epoch in 0usize..5000, period in 1usize..200) {
        let cfg = ScheduleConfig { period, ..ScheduleConfig::default() };
        let lr = cosine_lr(epoch, &cfg);
        prop_assert!(lr >= cfg.eta_min && lr <= cfg.eta_max);
        prop_assert_eq!(lr, cosine_lr(epoch + period, &cfg));
        prop_assert_eq!(cosine_lr(epoch * period, &cfg), cfg.eta_max);
    }

    #[test]
    fn t_intervals_nest(diffs in prop::collection::vec(-5.0f64..5.0, 2..20), level in 0.5f64..0.99) {
        prop_assume!(diffs.iter().any(|&d| d != diffs[0]));
        let one = paired_tci(&diffs, Sided::One, level).unwrap();
        let two = paired_tci(&diffs, Sided::Two, level).unwrap();
        prop_assert!(one.lower >= two.lower);
        prop_assert!(one.lower <= one.mean && one.upper.is_infinite());
        prop_assert!(((two.upper - two.mean) - (two.mean - two.lower)).abs() < 1e-9);
    }

    #[test]
    fn t_critical_matches_statrs(n in 2usize..60, level in 0.5f64..0.999) {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let diffs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
        let one = paired_tci(&diffs, Sided::One, level).unwrap();
        prop_assert!((one.t_critical - dist.inverse_cdf(level)).abs() < 1e-6);
        let two = paired_tci(&diffs, Sided::Two, level).unwrap();
        prop_assert!((two.t_critical - dist.inverse_cdf(0.5 + level / 2.0)).abs() < 1e-6);
    }

    #[test]
    fn split_partitions_the_pool(n in 1usize..200, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let (train, val) = split(n, frac, seed);
        prop_assert_eq!(val.len(), (n as f64 * frac).floor() as usize);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, frac, seed), (train, val));
    }

    #[test]
    fn flips_are_involutions(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let img = Image::from_fn(h, w, 3, |_, _, _| rng.uniform() as f32);
        prop_assert_eq!(img.flip_h().flip_h(), img.clone());
        prop_assert_eq!(img.flip_v().flip_v(), img.clone());
        prop_assert_eq!(img.flip_h().flip_v(), img.flip_v().flip_h());
        let m = Mask::new(h, w, (0..h * w).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        prop_assert_eq!(m.flip_h().flip_h(), m.clone());
        prop_assert_eq!(m.flip_v().flip_v(), m);
    }

    #[test]
    fn bilinear_resize_preserves_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, v in 0.0f32..1.0) {
        let img = Image::from_fn(h, w, 1, |_, _, _| v);
        let r = resize_bilinear(&img, oh, ow);
        prop_assert_eq!(r.dims(), (oh, ow));
        prop_assert!(r.data.iter().all(|&x| (x - v).abs() < 1e-6));
    }
}

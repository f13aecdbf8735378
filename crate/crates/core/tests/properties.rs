use faultformer::augment::{apply_branch, augment_sample, cutout, shift, AugmentConfig, Branch};
use faultformer::autodiff::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamStore, Tensor};
use faultformer::signal::{
    make_split, read_bundle, synth_generate, window_recording, write_bundle, Dataset, Experiment, SignalSample,
};
use faultformer::tokenize::{fft, ifft, tokenize_constant, tokenize_fourier, TokenizerId, TokenSequence};
use faultformer::train::{apply_mask, MaskAction, MaskConfig};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn sorted_bits(x: &[f64]) -> Vec<u64> {
    let mut v: Vec<u64> = x.iter().map(|f| f.to_bits()).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fan_out_gradient_is_exactly_two(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let t = Tensor::vector(v).with_requires_grad(true);
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        prop_assert!(gr.wrt(x).unwrap().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..40),
        c in -100.0f64..100.0,
    ) {
        let n = v.len();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let mut g = Graph::new();
        let a = g.constant(&[1, n], v).unwrap();
        let b = g.constant(&[1, n], shifted).unwrap();
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        prop_assert!((g.value(sa).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (p, q) in g.value(sa).iter().zip(g.value(sb)) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn adamw_decay_shrinks_with_zero_gradient(v in prop::collection::vec(0.01f64..5.0, 1..10), neg in any::<bool>()) {
        let v: Vec<f64> = v.into_iter().map(|x| if neg { -x } else { x }).collect();
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(v.clone()).with_requires_grad(true));
        let mut st = OptimizerState::new(&store, 1e-2, AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() });
        store.get_mut(id).accumulate_grad(&vec![0.0; v.len()]);
        adamw_step(&mut store, &mut st).unwrap();
        for (a, b) in store.get(id).data().iter().zip(&v) {
            prop_assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn ifft_inverts_fft(x in signal(1..300)) {
        let back = ifft(&fft(&x).unwrap()).unwrap();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b.re).abs() <= 1e-9 * scale && b.im.abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn parseval(x in signal(1..300)) {
        let n = x.len() as f64;
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = fft(&x).unwrap().iter().map(Complex64::norm_sqr).sum::<f64>() / n;
        prop_assert!((time - freq).abs() <= 1e-9 * time.max(1e-12));
    }

    #[test]
    fn constant_tokens_are_a_reshape(x in signal(1..40), d in 1usize..9) {
        let len = x.len() * d;
        let x: Vec<f64> = x.iter().cycle().take(len).cloned().collect();
        let t = tokenize_constant(&x, d).unwrap();
        prop_assert_eq!((t.n_tokens, t.token_dim), (len / d, d));
        prop_assert_eq!(&t.tokens, &x);
    }

    #[test]
    fn fourier_magnitudes_survive_circular_shift(x in signal(80..400), k in 0usize..400) {
        let k = k % x.len();
        let mut y = x.clone();
        y.rotate_right(k);
        let mags = |t: &TokenSequence| {
            let mut m: Vec<f64> = (0..t.n_tokens).map(|i| t.row(i)[0].hypot(t.row(i)[1])).collect();
            m.sort_by(f64::total_cmp);
            m
        };
        let (a, b) = (tokenize_fourier(&x, 40, true).unwrap(), tokenize_fourier(&y, 40, true).unwrap());
        for (p, q) in mags(&a).iter().zip(&mags(&b)) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
        let (fx, fy) = (fft(&x).unwrap(), fft(&y).unwrap());
        for (p, q) in fx.iter().zip(&fy) {
            prop_assert!((p.norm() - q.norm()).abs() <= 1e-9 * x.len() as f64);
        }
    }

    #[test]
    fn augmentations_preserve_length(x in signal(16..800), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in Branch::ALL {
            prop_assert_eq!(apply_branch(&x, b, &cfg, &mut rng).len(), x.len(), "{}", b);
        }
        prop_assert_eq!(augment_sample(&x, &cfg, &mut rng).len(), x.len());
    }

    #[test]
    fn shift_preserves_multiset(x in signal(2..500), k in any::<i64>()) {
        let h = (x.len() / 2) as i64;
        let k = k.rem_euclid(2 * h + 1) - h;
        prop_assert_eq!(sorted_bits(&shift(&x, k).unwrap()), sorted_bits(&x));
    }

    #[test]
    fn cutout_touches_at_most_w(x in signal(100..900), w in 0usize..600, s in 0usize..900) {
        let w = w.min(x.len());
        let start = s % (x.len() - w + 1);
        let y = cutout(&x, w, start).unwrap();
        let changed = x.iter().zip(&y).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= w);
    }

    #[test]
    fn zero_probability_is_identity_and_seeds_repeat(x in signal(16..400), seed in any::<u64>()) {
        let off = AugmentConfig::with_probability(0.0);
        prop_assert_eq!(augment_sample(&x, &off, &mut ChaCha8Rng::seed_from_u64(seed)), x.clone());
        let on = AugmentConfig::default();
        let a = augment_sample(&x, &on, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment_sample(&x, &on, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_plan_matches_corruption(x in signal(8..200), seed in any::<u64>()) {
        let t = tokenize_constant(&x[..x.len() / 4 * 4], 4).unwrap();
        let (c, plan) = apply_mask(&t, &MaskConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut random_rows = 0;
        for i in 0..t.n_tokens {
            match plan.actions[i] {
                None | Some(MaskAction::Keep) => prop_assert_eq!(c.row(i), t.row(i)),
                Some(MaskAction::Zero) => prop_assert!(c.row(i).iter().all(|&v| v == 0.0)),
                Some(MaskAction::Random) => random_rows += 1,
            }
            prop_assert_eq!(plan.masked[i], plan.actions[i].is_some());
        }
        prop_assert_eq!(plan.replacement_values.len(), random_rows * t.token_dim);
        prop_assert_eq!(c.tokenizer, TokenizerId::Constant);
    }

    #[test]
    fn windowing_conserves_points(len in 1usize..5000, w in 1usize..400, trim in 0usize..50) {
        let raw: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let block = w + 2 * trim;
        match window_recording(&raw, w, trim, 1.0, None) {
            Ok(ws) => {
                prop_assert!(ws.len() * block <= len && len < (ws.len() + 1) * block);
                prop_assert!(ws.iter().all(|s| s.len() == w));
            }
            Err(_) => prop_assert!(len < block),
        }
    }

    #[test]
    fn bundle_round_trips_at_32_bits(
        rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 7), 0u8..3), 1..12),
        labelled in any::<bool>(),
    ) {
        let samples: Vec<SignalSample> = rows
            .iter()
            .map(|(v, l)| SignalSample::new(v.clone(), labelled.then_some(*l), 12_000.0))
            .collect();
        let ds = Dataset::new("p", samples, 3).unwrap();
        let mut buf = Vec::new();
        write_bundle(&ds, &mut buf).unwrap();
        let back = read_bundle(&buf).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            prop_assert_eq!(a.label, b.label);
            let a32: Vec<f32> = a.values.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.values.iter().map(|&v| v as f32).collect();
            prop_assert_eq!(a32, b32);
        }
        let mut again = Vec::new();
        write_bundle(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}

fn ten_class_set() -> Dataset {
    synth_generate(10, 40, 64, 0.1, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint(seed in any::<u64>(), which in 0usize..4) {
        let ds = ten_class_set();
        let exp = match which {
            0 => Experiment::Baseline { test_fraction: 0.2 },
            1 => Experiment::Scarcity { n_pretrain: 200, n_train: 100, n_test: 50 },
            2 => Experiment::TaskAdapt { held_out: vec![3, 6, 9], test_fraction: 0.2 },
            _ => Experiment::DatasetAdapt { test_fraction: 0.25 },
        };
        let plan = make_split(&ds, &exp, seed).unwrap();
        let test: BTreeSet<usize> = plan.test_indices.iter().copied().collect();
        prop_assert!(plan.train_indices.iter().all(|i| !test.contains(i)));
        prop_assert!(plan.pretrain_indices.iter().all(|i| !test.contains(i)));
        let train: BTreeSet<usize> = plan.train_indices.iter().copied().collect();
        prop_assert!(plan.pretrain_indices.iter().all(|i| !train.contains(i)));
        if which == 2 {
            let held = [3u8, 6, 9];
            prop_assert!(plan.pretrain_indices.iter().all(|&i| !held.contains(&ds.samples[i].label.unwrap())));
            prop_assert!(plan.train_indices.iter().chain(&plan.test_indices).all(|&i| held.contains(&ds.samples[i].label.unwrap())));
        }
        prop_assert_eq!(make_split(&ds, &exp, seed).unwrap(), plan);
    }
}

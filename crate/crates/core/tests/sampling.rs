use pss_core::sampling::{self, argsort_desc, keep_count, score_magnitude, score_random, select, KeepRate, SortSpec};
use pss_core::{Tape, Tensor};
use proptest::prelude::*;

fn rate(r: f64) -> KeepRate {
    KeepRate::new(r).unwrap()
}

fn tokens(b: usize, p: usize, l: usize, seed: u64) -> Tensor<f32> {
    let u = pss_core::rng::uniform_block(seed, 0, 0, b * p * l);
    Tensor::new(&[b, p, l], u.iter().map(|v| (*v as f32) * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn keep_count_anchors() {
    assert_eq!(keep_count(rate(0.25), 16), 4);
    assert_eq!(keep_count(rate(0.2), 197), 39);
    assert_eq!(keep_count(rate(1.0), 197), 197);
    assert_eq!(keep_count(rate(0.001), 17), 1);
}

#[test]
fn magnitude_scores_match_direct_sum() {
    let x = tokens(3, 5, 7, 4);
    let s = score_magnitude(&x).unwrap();
    for b in 0..3 {
        for p in 0..5 {
            let want: f64 = x.data()[(b * 5 + p) * 7..(b * 5 + p + 1) * 7].iter().map(|v| (*v as f64).abs()).sum();
            let got = s.data()[b * 5 + p] as f64;
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1e-12));
        }
    }
    let hand = Tensor::new(&[1, 2, 3], vec![0.0f32, 0.0, 0.0, 1.0, -2.0, 3.0]).unwrap();
    assert_eq!(score_magnitude(&hand).unwrap().data(), &[0.0, 6.0]);
}

#[test]
fn random_scores_are_uniform_and_reproducible() {
    let a: Tensor<f64> = score_random(100, 1000, 5, 17);
    let b: Tensor<f64> = score_random(100, 1000, 5, 17);
    assert_eq!(a, b);
    let c: Tensor<f64> = score_random(100, 1000, 5, 18);
    assert_ne!(a, c);
    let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
    assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn argsort_examples() {
    let s = Tensor::new(&[1, 3], vec![0.4f32, 0.1, 0.9]).unwrap();
    assert_eq!(argsort_desc(&s), vec![vec![2, 0, 1]]);
    let flat = Tensor::new(&[1, 4], vec![0.5f32; 4]).unwrap();
    assert_eq!(argsort_desc(&flat), vec![vec![0, 1, 2, 3]]);
}

#[test]
fn composed_selection_example() {
    // patch magnitudes 0.4, 0.1, 0.9 behind a class token
    let x = Tensor::new(&[1, 4, 1], vec![5.0f32, 0.4, 0.1, 0.9]).unwrap();
    assert_eq!(select(&x, rate(0.75), SortSpec::magnitude(), 0).unwrap(), vec![vec![0, 3, 1]]);
}

#[test]
fn full_rate_skips_the_block() {
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(tokens(2, 5, 3, 1));
    let before = tape.len();
    let tb = sampling::sample(&mut tape, v, 1.0, SortSpec::magnitude(), 0).unwrap();
    assert!(tb.skipped);
    assert_eq!(tb.tokens, v);
    assert_eq!(tape.len(), before);
    assert_eq!(tb.kept, vec![(0..5).collect::<Vec<_>>(); 2]);
}

#[test]
fn non_positive_rate_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(tokens(1, 5, 3, 1));
    assert!(sampling::sample(&mut tape, v, 0.0, SortSpec::magnitude(), 0).is_err());
    assert!(sampling::sample(&mut tape, v, -0.5, SortSpec::magnitude(), 0).is_err());
    assert!(KeepRate::new(1.5).is_err());
}

#[test]
fn dropped_patch_embeddings_get_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tokens(3, 9, 4, 2);
    let v = tape.leaf(x);
    let tb = sampling::sample(&mut tape, v, 0.5, SortSpec::random(3), 7).unwrap();
    let sq = tape.mul(tb.tokens, tb.tokens).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    let g = g.wrt(v).unwrap();
    for (b, kept) in tb.kept.iter().enumerate() {
        for p in 0..9 {
            let row = &g.data()[(b * 9 + p) * 4..(b * 9 + p + 1) * 4];
            assert_eq!(row.iter().any(|v| v.to_bits() != 0), kept.contains(&p), "image {b} token {p}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_output_with_class_token(b in 1usize..4, p in 2usize..20, l in 1usize..6, rho in 0.01f64..1.0, seed in any::<u64>(), random in any::<bool>()) {
        let sort = if random { SortSpec::random(seed) } else { SortSpec::magnitude() };
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(tokens(b, p, l, seed));
        let tb = sampling::sample(&mut tape, v, rho, sort, 3).unwrap();
        let k = keep_count(rate(rho), p);
        prop_assert_eq!(tape.shape(tb.tokens), &[b, k, l][..]);
        for kept in &tb.kept {
            prop_assert_eq!(kept.len(), k);
            prop_assert_eq!(kept[0], 0);
            let mut s = kept.clone();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), k);
            prop_assert!(kept.iter().all(|&i| i < p));
        }
        // gathered rows are the original rows
        let src = tape.value(v).data().to_vec();
        let out = tape.value(tb.tokens).data();
        for (bi, kept) in tb.kept.iter().enumerate() {
            for (j, &t) in kept.iter().enumerate() {
                prop_assert_eq!(&out[(bi * k + j) * l..(bi * k + j + 1) * l], &src[(bi * p + t) * l..(bi * p + t + 1) * l]);
            }
        }
    }

    #[test]
    fn magnitude_selection_nests(p in 2usize..30, r1 in 0.01f64..1.0, r2 in 0.01f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let x = tokens(2, p, 3, seed);
        let small = select(&x, rate(lo), SortSpec::magnitude(), 0).unwrap();
        let big = select(&x, rate(hi), SortSpec::magnitude(), 0).unwrap();
        for (s, b) in small.iter().zip(&big) {
            prop_assert!(s.iter().all(|t| b.contains(t)));
        }
    }

    #[test]
    fn magnitude_kept_scores_non_increasing(p in 3usize..30, seed in any::<u64>(), rho in 0.05f64..1.0) {
        let x = tokens(1, p, 4, seed);
        let kept = &select(&x, rate(rho), SortSpec::magnitude(), 0).unwrap()[0];
        let score = |t: usize| x.data()[t * 4..(t + 1) * 4].iter().map(|v| v.abs()).sum::<f32>();
        for w in kept[1..].windows(2) {
            prop_assert!(score(w[0]) >= score(w[1]));
        }
        let dropped_max = (1..p).filter(|t| !kept.contains(t)).map(score).fold(f32::NEG_INFINITY, f32::max);
        let kept_min = kept[1..].iter().map(|&t| score(t)).fold(f32::INFINITY, f32::min);
        prop_assert!(kept.len() == 1 || kept_min >= dropped_max);
    }

    #[test]
    fn random_selection_is_deterministic(seed in any::<u64>(), iter in any::<u64>(), rho in 0.05f64..1.0) {
        let x = tokens(3, 12, 2, 1);
        let a = select(&x, rate(rho), SortSpec::random(seed), iter).unwrap();
        let b = select(&x, rate(rho), SortSpec::random(seed), iter).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn keep_count_in_range(rho in 1e-6f64..=1.0, p in 1usize..500) {
        let k = keep_count(rate(rho), p);
        prop_assert!(k >= 1 && k <= p);
        prop_assert!((k as f64 - rho * p as f64).abs() <= 0.5 + 1e-6 || k == 1);
    }
}

mod common;

use proptest::prelude::*;
use starpose::attention::{attention_linear, attention_naive, FeatureKind, FeatureMap, MaddCounter, ATTN_EPS};
use starpose::metrics::pck;
use starpose::patch::{fold3d, unfold3d, Patch};
use starpose::selftest::max_rel_err;
use starpose::tape::{pixel_shuffle, pixel_unshuffle};
use starpose::{tnsr, Tensor};

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut common::rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_attention_agrees_with_naive(n in 1usize..48, m in 1usize..48, d in 1usize..12, dv in 1usize..12,
                                          alpha in 0.005f64..0.1, seed in any::<u64>()) {
        let q = tensor(vec![n, d], seed);
        let k = tensor(vec![m, d], seed ^ 1);
        let v = tensor(vec![m, dv], seed ^ 2);
        let phi = FeatureMap::new(FeatureKind::ScLeaky, alpha);
        let slow = attention_naive(&q, &k, &v, phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
        let fast = attention_linear(&q, &k, &v, phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
        prop_assert!(max_rel_err(&fast, &slow, 1e-12) < 1e-6);
    }

    #[test]
    fn permuting_keys_and_values_leaves_output_unchanged(n in 2usize..24, d in 1usize..8, seed in any::<u64>(),
                                                         shift in 1usize..23) {
        let q = tensor(vec![n, d], seed);
        let k = tensor(vec![n, d], seed ^ 1);
        let v = tensor(vec![n, 3], seed ^ 2);
        let rot = |t: &Tensor<f64>| {
            let w = t.shape()[1];
            let mut data = t.data().to_vec();
            data.rotate_left((shift % n) * w);
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let phi = FeatureMap::new(FeatureKind::ScLeaky, 0.01);
        let a = attention_naive(&q, &k, &v, phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
        let b = attention_naive(&q, &rot(&k), &rot(&v), phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn fold_inverts_unfold(t in 1usize..4, c in 1usize..4, gh in 1usize..4, gw in 1usize..4,
                           ph in 1usize..5, pw in 1usize..5, seed in any::<u64>()) {
        let patch = Patch::new(1, ph, pw);
        let map = tensor(vec![t, c, gh * ph, gw * pw], seed);
        let seq = unfold3d(&map, patch).unwrap();
        prop_assert_eq!(fold3d(&seq.tokens, seq.grid, patch).unwrap(), map);
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle(b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6,
                                       r in 1usize..5, seed in any::<u64>()) {
        let x = tensor(vec![b, c * r * r, h, w], seed);
        let up = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(up.shape(), &[b, c, h * r, w * r][..]);
        prop_assert_eq!(pixel_unshuffle(&up, r).unwrap(), x);
    }

    #[test]
    fn feature_map_is_nonnegative_and_monotone(alpha in 0.001f64..0.5, a in -400.0f64..50.0, b in -400.0f64..50.0) {
        let phi = FeatureMap::new(FeatureKind::ScLeaky, alpha);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(phi.apply(lo) >= 0.0);
        prop_assert!(phi.apply(lo) <= phi.apply(hi));
    }

    #[test]
    fn tnsr_round_trip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = tensor(shape, seed);
        prop_assert_eq!(tnsr::decode::<f64>(&tnsr::encode(&t)).unwrap(), t.clone());
        let t32 = t.cast::<f32>();
        prop_assert_eq!(tnsr::decode::<f32>(&tnsr::encode(&t32)).unwrap(), t32);
    }

    #[test]
    fn pck_counts_the_threshold_distance_as_correct(m in 1u32..40, flip in any::<bool>()) {
        // A 3-4-5 offset of length exactly tau * height.
        let m = f64::from(m);
        let (dx, dy) = if flip { (4.0 * m, -3.0 * m) } else { (-3.0 * m, 4.0 * m) };
        let truth = [(100.0, 100.0)];
        let height = 20.0 * m;
        prop_assert_eq!(pck(&[(100.0 + dx, 100.0 + dy)], &truth, height, 0.25).unwrap(), 1.0);
        prop_assert_eq!(pck(&[(100.0 + dx, 100.0 + dy + dy.signum())], &truth, height, 0.25).unwrap(), 0.0);
    }
}

//! Frozen reference outputs. Regenerate with `STARPOSE_BLESS=1 cargo test --test goldens`
//! only after a deliberate numerical change.

mod common;

use common::{check_golden, rng};
use starpose::attention::{
    attention_linear, attention_naive, FeatureKind, FeatureMap, MaddCounter, ALPHA_INIT, ATTN_EPS,
};
use starpose::config::ModelConfig;
use starpose::metrics::ssim;
use starpose::model::{super_resolve, StarNet};
use starpose::optim::ParamStore;
use starpose::patch::{Grid, PositionalTable};
use starpose::synth::{bicubic_resize, Resize};
use starpose::Tensor;

#[test]
fn attention_naive_matches_frozen_output() {
    let mut r = rng(16);
    let q = Tensor::<f64>::randn(vec![16, 4], 1.0, &mut r);
    let k = Tensor::<f64>::randn(vec![16, 4], 1.0, &mut r);
    let v = Tensor::<f64>::randn(vec![16, 4], 1.0, &mut r);
    check_golden("attention/q", &q, 0.0);
    check_golden("attention/k", &k, 0.0);
    check_golden("attention/v", &v, 0.0);
    let phi = FeatureMap::new(FeatureKind::ScLeaky, ALPHA_INIT);
    let out = attention_naive(&q, &k, &v, phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
    check_golden("attention/naive_out", &out, 1e-12);
    let fast = attention_linear(&q, &k, &v, phi, ATTN_EPS, &mut MaddCounter::default()).unwrap();
    check_golden("attention/naive_out", &fast, 1e-12);
}

#[test]
fn positional_table_matches_frozen_values() {
    let mut store = ParamStore::<f64>::new();
    let table = PositionalTable::new(&mut store, "pe", 8, 12, &mut rng(5)).unwrap();
    let pe = table.table(&store, Grid { t: 5, h: 2, w: 2 }).unwrap();
    assert_eq!(pe.shape(), &[20, 12]);
    check_golden("positional_5x2x2", &pe, 1e-12);
}

#[test]
fn ssim_of_binary_image_and_inverse_is_frozen_and_negative() {
    let mut r = rng(3);
    let a = Tensor::<f64>::uniform(vec![1, 3, 24, 24], 0.0, 1.0, &mut r).map(|x| if x > 0.5 { 1.0 } else { 0.0 });
    let inv = a.map(|x| 1.0 - x);
    let s = ssim(&a, &inv).unwrap();
    assert!(s < 0.0, "ssim {s}");
    check_golden("ssim_binary_inverse", &Tensor::scalar(s), 1e-12);
}

#[test]
fn bicubic_round_trip_of_smooth_ramp_is_frozen() {
    let n = 64;
    let ramp = Tensor::<f64>::from_fn(vec![1, 1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        0.3 + 0.003 * x + 0.002 * y
    });
    let down = bicubic_resize(&ramp, Resize::Down(4)).unwrap();
    let back = bicubic_resize(&down, Resize::Up(4)).unwrap();
    // Edge clamping bends the ramp within 6 px of the border; elsewhere the
    // cubic reproduces it exactly.
    for y in 6..n - 6 {
        for x in 6..n - 6 {
            assert!((back.at(&[0, 0, y, x]) - ramp.at(&[0, 0, y, x])).abs() < 1e-12);
        }
    }
    check_golden("bicubic_ramp_round_trip", &back, 1e-12);
}

#[test]
fn smoke_forward_matches_frozen_output() {
    let config = ModelConfig {
        seed: 7,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::<f64>::new();
    let net = StarNet::new(&config, &mut store).unwrap();
    let lr = Tensor::<f64>::uniform(vec![config.frames, 3, 8, 8], 0.0, 1.0, &mut rng(11));
    let sr = super_resolve(&lr, &net, &store).unwrap();
    assert_eq!(sr.shape(), &[1, 3, 32, 32]);
    check_golden("smoke_forward", &sr, 1e-9);
}

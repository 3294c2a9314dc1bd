//! Oracle, gradient and invariant checks that need no dataset. Used by the
//! `selftest` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affm::{inject, inject_var, FusionStage};
use crate::attention::{
    attention_linear, attention_naive, attention_weights, linear_attention_var, FeatureKind, FeatureMap, MaddCounter,
    TransformerBlock, ATTN_EPS,
};
use crate::bench::{attention_softmax, bench_attention, BenchConfig, BenchKernel};
use crate::cnn::{ConvStage, StageKind};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::gradcheck::{check, check_with_params, rel_err, GradCheckReport};
use crate::metrics::{pck, psnr, ssim};
use crate::optim::ParamStore;
use crate::patch::{fold3d, fold3d_var, unfold3d, unfold3d_var, Grid, Patch, PositionalTable};
use crate::pose::{compound_loss, compound_loss_var, DEFAULT_LAMBDA};
use crate::tape::{pixel_shuffle, pixel_unshuffle, sc_leaky, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("[{tag}] {}: {}", self.name, self.detail)
    }
}

// ---------------------------------------------------------------- attention oracle

/// Largest `|a − b| / max(|a|, |b|, floor)` over two equally shaped tensors.
pub fn max_rel_err<T: crate::scalar::Real>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| rel_err(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}

/// Denominator floor for elementwise relative errors on O(1) outputs: tiny
/// for f64, one f32 quantum of an O(1) value for f32.
pub const ORACLE_FLOOR_F64: f64 = 1e-12;
pub const ORACLE_FLOOR_F32: f64 = 1e-3;

/// Linear against quadratic attention on `cases` random problems with
/// `N ∈ [4, 64]`, `D_h ∈ [2, 16]`, cycling through the feature maps.
pub fn oracle_equivalence(cases: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [FeatureKind::ScLeaky, FeatureKind::Relu, FeatureKind::Elu1];
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for c in 0..cases {
        let n = rng.gen_range(4..=64);
        let d = rng.gen_range(2..=16);
        let dv = rng.gen_range(2..=16);
        let nk = rng.gen_range(4..=64);
        let alpha = [0.005, 0.01, 0.1][c % 3];
        let phi = FeatureMap::new(kinds[c % 3], alpha);
        let q = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![nk, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![nk, dv], 1.0, &mut rng);
        let mut cnt = MaddCounter::default();
        let lin = attention_linear(&q, &k, &v, phi, ATTN_EPS, &mut cnt)?;
        let naive = attention_naive(&q, &k, &v, phi, ATTN_EPS, &mut cnt)?;
        worst64 = worst64.max(max_rel_err(&lin, &naive, ORACLE_FLOOR_F64));
        let (q32, k32, v32) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
        let lin32 = attention_linear(&q32, &k32, &v32, phi, ATTN_EPS, &mut cnt)?;
        let naive32 = attention_naive(&q32, &k32, &v32, phi, ATTN_EPS, &mut cnt)?;
        worst32 = worst32.max(max_rel_err(&lin32, &naive32, ORACLE_FLOOR_F32));
    }
    Ok((worst64, worst32))
}

pub fn check_oracle() -> Check {
    Check::from_result(
        "oracle equivalence",
        oracle_equivalence(100, 1).map(|(e64, e32)| {
            Check::new(
                "oracle equivalence",
                e64 < 1e-6 && e32 < 1e-3,
                format!("100 cases, max rel err f64 {e64:.2e} (< 1e-6), f32 {e32:.2e} (< 1e-3)"),
            )
        }),
    )
}

// ---------------------------------------------------------------- complexity

/// Instrumented multiply-add counts for one kernel at sequence length `n`.
pub fn madds_at(kernel: BenchKernel, n: usize, d_h: usize) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let q = Tensor::<f32>::randn(vec![n, d_h], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(vec![n, d_h], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(vec![n, d_h], 1.0, &mut rng);
    let mut c = MaddCounter::default();
    match kernel {
        BenchKernel::Softmax => {
            attention_softmax(&q, &k, &v, &mut c)?;
        }
        _ => {
            let kind = match kernel {
                BenchKernel::LinearElu1 => FeatureKind::Elu1,
                BenchKernel::LinearRelu => FeatureKind::Relu,
                _ => FeatureKind::ScLeaky,
            };
            attention_linear(&q, &k, &v, FeatureMap::new(kind, 0.01), ATTN_EPS, &mut c)?;
        }
    }
    Ok(c.0)
}

/// Worst doubling ratios of operation counts over `N = 256 … 4096`:
/// (linear min, linear max, softmax min, softmax max).
pub fn madd_ratios() -> Result<(f64, f64, f64, f64)> {
    let ns = [256usize, 512, 1024, 2048, 4096];
    let (mut lmin, mut lmax, mut smin, mut smax) = (f64::MAX, 0.0f64, f64::MAX, 0.0f64);
    for kernel in BenchKernel::ALL {
        let counts = ns
            .iter()
            .map(|&n| madds_at(kernel, n, 32))
            .collect::<Result<Vec<_>>>()?;
        for w in counts.windows(2) {
            let r = w[1] as f64 / w[0] as f64;
            if kernel == BenchKernel::Softmax {
                smin = smin.min(r);
                smax = smax.max(r);
            } else {
                lmin = lmin.min(r);
                lmax = lmax.max(r);
            }
        }
    }
    Ok((lmin, lmax, smin, smax))
}

pub fn check_madds() -> Check {
    Check::from_result(
        "operation-count scaling",
        madd_ratios().map(|(lmin, lmax, smin, smax)| {
            Check::new(
                "operation-count scaling",
                lmin >= 1.95 && lmax <= 2.05 && smin >= 3.9 && smax <= 4.1,
                format!("linear madds(2N)/madds(N) in [{lmin:.4}, {lmax:.4}], softmax in [{smin:.4}, {smax:.4}]"),
            )
        }),
    )
}

/// Softmax over linear (shifted-clipped leaky) median wall time at `n`.
pub fn wall_ratio(n: usize) -> Result<f64> {
    let recs = bench_attention(&BenchConfig {
        ns: vec![n],
        kernels: vec![BenchKernel::LinearScLeaky, BenchKernel::Softmax],
        ..BenchConfig::default()
    })?;
    let t = |k: BenchKernel| {
        recs.iter()
            .find(|r| r.kernel == k)
            .map(|r| r.wall_ns_median as f64)
            .unwrap_or(f64::NAN)
    };
    Ok(t(BenchKernel::Softmax) / t(BenchKernel::LinearScLeaky))
}

pub fn check_wall_time() -> Check {
    Check::from_result(
        "wall-time scaling",
        wall_ratio(4096).map(|r| {
            Check::new(
                "wall-time scaling",
                r > 4.0,
                format!("softmax/linear at N=4096: {r:.1}x (> 4)"),
            )
        }),
    )
}

// ---------------------------------------------------------------- gradients

pub const GRAD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-6;

/// Scalar probe `Σ y ⊙ R` with a fixed random `R`, so that no symmetric
/// cancellation hides a wrong gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng));
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    // magnitudes in [0.2, 1] with random signs, away from activation kinks
    let nz = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.2..1.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let alpha = Tensor::scalar(0.3);
    // x values for the clipped activation spread over all three branches,
    // kept away from 0 and −1/α.
    let sc_x = Tensor::new(vec![6], vec![0.7, 0.2, -0.5, -1.9, -4.0, -6.5]).unwrap();
    let distinct = Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.9, 0.1, 0.55, -0.2]).unwrap();
    vec![
        (
            "matmul",
            vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 1)
            }),
        ),
        (
            "transpose",
            vec![rand_t(&[3, 4], r)],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                probe(t, y, 2)
            }),
        ),
        (
            "linear",
            vec![rand_t(&[5, 3], r), rand_t(&[3, 4], r), rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 3)
            }),
        ),
        (
            "add",
            vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y, 4)
            }),
        ),
        (
            "sub",
            vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe(t, y, 5)
            }),
        ),
        (
            "mul",
            vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y, 6)
            }),
        ),
        (
            "mul by scalar",
            vec![rand_t(&[1], r), rand_t(&[2, 3], r)],
            Box::new(|t, v| {
                let s = t.reshape(v[0], vec![])?;
                let y = t.mul(s, v[1])?;
                probe(t, y, 7)
            }),
        ),
        (
            "div",
            vec![rand_t(&[2, 3], r), nz(&[2, 3], r)],
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                probe(t, y, 8)
            }),
        ),
        (
            "exp",
            vec![rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.exp(v[0])?;
                probe(t, y, 9)
            }),
        ),
        (
            "log",
            vec![Tensor::uniform(vec![4], 0.3, 2.0, r)],
            Box::new(|t, v| {
                let y = t.log(v[0])?;
                probe(t, y, 10)
            }),
        ),
        (
            "neg",
            vec![rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.neg(v[0])?;
                probe(t, y, 11)
            }),
        ),
        (
            "abs",
            vec![nz(&[6], r)],
            Box::new(|t, v| {
                let y = t.abs(v[0])?;
                probe(t, y, 12)
            }),
        ),
        (
            "scale",
            vec![rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.scale(v[0], 2.5)?;
                probe(t, y, 13)
            }),
        ),
        (
            "add_scalar",
            vec![rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], -0.7)?;
                probe(t, y, 14)
            }),
        ),
        (
            "clamp_min",
            vec![nz(&[6], r)],
            Box::new(|t, v| {
                let y = t.clamp_min(v[0], 0.0)?;
                probe(t, y, 15)
            }),
        ),
        (
            "sigmoid",
            vec![rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                probe(t, y, 16)
            }),
        ),
        (
            "relu",
            vec![nz(&[6], r)],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                probe(t, y, 17)
            }),
        ),
        (
            "leaky",
            vec![nz(&[6], r)],
            Box::new(|t, v| {
                let y = t.leaky(v[0], 0.1)?;
                probe(t, y, 18)
            }),
        ),
        (
            "elu1",
            vec![nz(&[6], r)],
            Box::new(|t, v| {
                let y = t.elu1(v[0])?;
                probe(t, y, 19)
            }),
        ),
        (
            "sc_leaky_relu",
            vec![sc_x, alpha],
            Box::new(|t, v| {
                let y = t.sc_leaky_relu(v[0], v[1])?;
                probe(t, y, 20)
            }),
        ),
        (
            "sum over axis",
            vec![rand_t(&[2, 3, 2], r)],
            Box::new(|t, v| {
                let y = t.sum(v[0], &[1])?;
                probe(t, y, 21)
            }),
        ),
        (
            "mean over axes",
            vec![rand_t(&[2, 3, 2], r)],
            Box::new(|t, v| {
                let y = t.mean(v[0], &[0, 2])?;
                probe(t, y, 22)
            }),
        ),
        (
            "max over axis",
            vec![distinct],
            Box::new(|t, v| {
                let y = t.max(v[0], &[1])?;
                probe(t, y, 23)
            }),
        ),
        (
            "sum_all",
            vec![rand_t(&[3, 2], r)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "mean_all",
            vec![rand_t(&[3, 2], r)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean_all(y)
            }),
        ),
        (
            "reshape",
            vec![rand_t(&[2, 6], r)],
            Box::new(|t, v| {
                let y = t.reshape(v[0], vec![3, 4])?;
                probe(t, y, 24)
            }),
        ),
        (
            "permute",
            vec![rand_t(&[2, 3, 4], r)],
            Box::new(|t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                probe(t, y, 25)
            }),
        ),
        (
            "expand",
            vec![rand_t(&[2, 1, 3], r)],
            Box::new(|t, v| {
                let y = t.expand(v[0], vec![2, 4, 3])?;
                probe(t, y, 26)
            }),
        ),
        (
            "narrow",
            vec![rand_t(&[3, 5], r)],
            Box::new(|t, v| {
                let y = t.narrow(v[0], 1, 1, 3)?;
                probe(t, y, 27)
            }),
        ),
        (
            "concat",
            vec![rand_t(&[2, 2, 3], r), rand_t(&[2, 1, 3], r)],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                probe(t, y, 28)
            }),
        ),
        (
            "conv2d",
            vec![rand_t(&[2, 3, 5, 4], r), rand_t(&[2, 3, 3, 3], r), rand_t(&[2], r)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
                probe(t, y, 29)
            }),
        ),
        (
            "conv2d stride 2",
            vec![rand_t(&[1, 2, 6, 5], r), rand_t(&[3, 2, 3, 3], r)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1, 1)?;
                probe(t, y, 30)
            }),
        ),
        (
            "depthwise conv2d",
            vec![rand_t(&[2, 4, 4, 4], r), rand_t(&[4, 1, 5, 5], r), rand_t(&[4], r)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 2, 4)?;
                probe(t, y, 31)
            }),
        ),
        (
            "pixel_shuffle",
            vec![rand_t(&[1, 8, 2, 3], r)],
            Box::new(|t, v| {
                let y = t.pixel_shuffle(v[0], 2)?;
                probe(t, y, 32)
            }),
        ),
        (
            "pixel_unshuffle",
            vec![rand_t(&[1, 2, 4, 6], r)],
            Box::new(|t, v| {
                let y = t.pixel_unshuffle(v[0], 2)?;
                probe(t, y, 33)
            }),
        ),
        (
            "layer_norm",
            vec![rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 34)
            }),
        ),
        (
            "linear attention (shifted-clipped leaky)",
            vec![
                rand_t(&[6, 3], r),
                rand_t(&[6, 3], r),
                rand_t(&[6, 2], r),
                Tensor::scalar(0.4),
            ],
            Box::new(|t, v| {
                let y = linear_attention_var(t, v[0], v[1], v[2], FeatureKind::ScLeaky, v[3], ATTN_EPS)?;
                probe(t, y, 35)
            }),
        ),
        (
            "linear attention (elu+1)",
            vec![
                rand_t(&[5, 3], r),
                rand_t(&[5, 3], r),
                rand_t(&[5, 2], r),
                Tensor::scalar(0.4),
            ],
            Box::new(|t, v| {
                let y = linear_attention_var(t, v[0], v[1], v[2], FeatureKind::Elu1, v[3], ATTN_EPS)?;
                probe(t, y, 36)
            }),
        ),
        (
            "unfold3d",
            vec![rand_t(&[2, 2, 4, 4], r)],
            Box::new(|t, v| {
                let (y, _) = unfold3d_var(t, v[0], Patch::new(1, 2, 2))?;
                probe(t, y, 37)
            }),
        ),
        (
            "fold3d",
            vec![rand_t(&[8, 8], r)],
            Box::new(|t, v| {
                let y = fold3d_var(t, v[0], Grid { t: 2, h: 2, w: 2 }, Patch::new(1, 2, 2))?;
                probe(t, y, 38)
            }),
        ),
        (
            "beta injection",
            vec![rand_t(&[4, 3], r), rand_t(&[4, 3], r), Tensor::scalar(0.6)],
            Box::new(|t, v| {
                let y = inject_var(t, v[0], v[1], v[2])?;
                probe(t, y, 39)
            }),
        ),
    ]
}

fn grad_check(name: &str, rep: Result<GradCheckReport>) -> Check {
    match rep {
        Ok(r) => Check::new(
            format!("gradient: {name}"),
            r.passes(GRAD_TOL),
            format!(
                "{} entries, max rel err {:.2e}, max abs err {:.2e}",
                r.checked, r.max_rel_err, r.max_abs_err
            ),
        ),
        Err(e) => Check::new(format!("gradient: {name}"), false, format!("error: {e}")),
    }
}

/// Finite-difference checks of every differentiable op.
pub fn op_gradient_checks() -> Vec<Check> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| grad_check(name, check(&inputs, GRAD_STEP, GRAD_FLOOR, |t, v| f(t, v))))
        .collect()
}

/// Finite-difference checks of the composite blocks, over inputs and every
/// parameter.
pub fn block_gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // Positional encoding: one projection parameter.
    {
        let mut store = ParamStore::<f64>::new();
        let grid = Grid { t: 2, h: 2, w: 3 };
        let pe = PositionalTable::new(&mut store, "pos", 4, 5, &mut rng);
        let x = rand_t(&[grid.len(), 5], &mut rng);
        let rep = pe.and_then(|pe| {
            check_with_params(&store, &[x], GRAD_STEP, GRAD_FLOOR, |t, s, v| {
                let y = pe.encode_var(t, s, v[0], grid)?;
                probe(t, y, 40)
            })
        });
        out.push(grad_check("positional encoding", rep));
    }

    // Transformer block: 8 heads of width 1 split 3/3/2 over the three scales.
    for kind in [FeatureKind::ScLeaky, FeatureKind::Relu] {
        let mut store = ParamStore::<f64>::new();
        let grid = Grid { t: 2, h: 2, w: 3 };
        let block = TransformerBlock::new(&mut store, "blk", 8, 8, kind, &mut rng);
        perturb_all(&mut store, &mut rng);
        let x = rand_t(&[grid.len(), 8], &mut rng);
        let rep = block.and_then(|b| {
            check_with_params(&store, &[x], GRAD_STEP, GRAD_FLOOR, |t, s, v| {
                let y = b.forward(t, s, v[0], grid)?;
                probe(t, y, 41)
            })
        });
        out.push(grad_check(&format!("transformer block ({})", kind.name()), rep));
    }

    for (kind, name) in [(StageKind::FusedMBConv, "Fused-MBConv"), (StageKind::MBConv, "MBConv")] {
        let mut store = ParamStore::<f64>::new();
        let stage = ConvStage::new(&mut store, "stage", kind, 4, &mut rng);
        perturb_all(&mut store, &mut rng);
        let x = rand_t(&[2, 4, 4, 4], &mut rng);
        let rep = check_with_params(&store, &[x], GRAD_STEP, GRAD_FLOOR, |t, s, v| {
            let y = stage.forward(t, s, v[0])?;
            probe(t, y, 42)
        });
        out.push(grad_check(name, rep));
    }

    // Fusion with a non-zero gate so every parameter carries gradient.
    {
        let mut store = ParamStore::<f64>::new();
        let grid = Grid { t: 2, h: 2, w: 2 };
        let patch = Patch::new(1, 2, 2);
        let rep = FusionStage::new(&mut store, "affm", 8, 3, patch, &mut rng).and_then(|stage| {
            perturb_all(&mut store, &mut rng);
            *store.get_mut(stage.beta) = Tensor::scalar(0.7);
            let tokens = rand_t(&[grid.len(), 8], &mut rng);
            let maps = rand_t(&[2, 3, 4, 4], &mut rng);
            check_with_params(&store, &[tokens, maps], GRAD_STEP, GRAD_FLOOR, |t, s, v| {
                let fused = stage.fuse_var(t, s, v[0], v[1], grid)?;
                let y = stage.inject_var(t, s, v[0], fused)?;
                probe(t, y, 43)
            })
        });
        out.push(grad_check("AFFM fuse and inject", rep));
    }

    {
        let sr = rand_t(&[1, 3, 4, 4], &mut rng);
        let hr = rand_t(&[1, 3, 4, 4], &mut rng);
        let pred = rand_t(&[1, 2, 2, 2], &mut rng);
        let target = rand_t(&[1, 2, 2, 2], &mut rng);
        let rep = check(&[sr, hr, pred, target], GRAD_STEP, GRAD_FLOOR, |t, v| {
            Ok(compound_loss_var(t, v[0], v[1], v[2], v[3], DEFAULT_LAMBDA)?.total)
        });
        out.push(grad_check("compound loss", rep));
    }
    out
}

/// Moves every parameter off its initial value so that zero-initialized
/// biases and gates do not mask gradient paths.
fn perturb_all(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.ends_with("log_alpha") {
            continue;
        }
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

// ---------------------------------------------------------------- activation contract

pub const CONTRACT_ALPHAS: [f64; 3] = [0.005, 0.01, 0.1];

/// Worst continuity gap of the shifted-clipped leaky activation at its two
/// breakpoints, comparing the adjacent representable inputs.
pub fn sc_leaky_gap(alpha: f64) -> f64 {
    let f = |x: f64| sc_leaky(x, alpha);
    let around = |x: f64| {
        let lo = f64::from_bits(x.to_bits() + 1).min(f64::from_bits(x.to_bits() - 1));
        let hi = f64::from_bits(x.to_bits() + 1).max(f64::from_bits(x.to_bits() - 1));
        (f(hi) - f(lo))
            .abs()
            .max((f(hi) - f(x)).abs())
            .max((f(x) - f(lo)).abs())
    };
    let zero = (f(f64::MIN_POSITIVE) - f(-f64::MIN_POSITIVE))
        .abs()
        .max((f(0.0) - f(f64::MIN_POSITIVE)).abs());
    zero.max(around(-1.0 / alpha))
}

pub fn check_sc_leaky_contract() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for alpha in CONTRACT_ALPHAS {
        let lo = -2.0 / alpha;
        let xs: Vec<f64> = (0..=20_000).map(|i| lo + (4.0 - lo) * i as f64 / 20_000.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| sc_leaky(x, alpha)).collect();
        let nonneg = ys.iter().all(|&y| y >= 0.0);
        let mono = ys.windows(2).all(|w| w[1] >= w[0]);
        let gap = sc_leaky_gap(alpha);
        ok &= nonneg && mono && gap < 1e-12;
        detail.push(format!(
            "alpha {alpha}: nonneg {nonneg}, monotone {mono}, gap {gap:.1e}"
        ));
    }
    Check::new("activation contract", ok, detail.join("; "))
}

// ---------------------------------------------------------------- normalization

/// Worst `|Σ_j w_ij − 1|` over rows whose total similarity exceeds ε, and
/// the number of such rows.
pub fn weight_row_error(cases: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut rows) = (0.0f64, 0usize);
    for c in 0..cases {
        let kind = [FeatureKind::ScLeaky, FeatureKind::Relu, FeatureKind::Elu1][c % 3];
        let phi = FeatureMap::new(kind, 0.01);
        let n = rng.gen_range(1..=32);
        let nk = rng.gen_range(1..=32);
        let d = rng.gen_range(1..=8);
        let q = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![nk, d], 1.0, &mut rng);
        let w = attention_weights(&q, &k, phi, ATTN_EPS)?;
        let (fq, fk) = (phi.map_tensor(&q), phi.map_tensor(&k));
        for i in 0..n {
            let den: f64 = (0..nk)
                .map(|j| (0..d).map(|a| fq.data()[i * d + a] * fk.data()[j * d + a]).sum::<f64>())
                .sum();
            if den > ATTN_EPS {
                let s: f64 = w.data()[i * nk..(i + 1) * nk].iter().sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    Ok((worst, rows))
}

pub fn check_normalization() -> Check {
    Check::from_result(
        "attention normalization",
        weight_row_error(60, 5).map(|(e, rows)| {
            Check::new(
                "attention normalization",
                e <= 1e-9,
                format!("{rows} rows, max |sum - 1| {e:.1e} (<= 1e-9)"),
            )
        }),
    )
}

// ---------------------------------------------------------------- structural identities

pub fn structural_identities() -> Result<Vec<(&'static str, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut out = Vec::new();

    let patch = Patch::new(1, 4, 4);
    let map = Tensor::<f64>::randn(vec![3, 5, 8, 12], 1.0, &mut rng);
    let seq = unfold3d(&map, patch)?;
    out.push(("fold of unfold", fold3d(&seq.tokens, seq.grid, patch)? == map));

    let x = Tensor::<f64>::randn(vec![2, 3, 8, 4], 1.0, &mut rng);
    out.push((
        "pixel shuffle of unshuffle",
        pixel_shuffle(&pixel_unshuffle(&x, 4)?, 4)? == x,
    ));
    let y = Tensor::<f64>::randn(vec![2, 12, 3, 5], 1.0, &mut rng);
    out.push((
        "pixel unshuffle of shuffle",
        pixel_unshuffle(&pixel_shuffle(&y, 2)?, 2)? == y,
    ));

    let o = Tensor::<f64>::randn(vec![10, 8], 1.0, &mut rng);
    let f = Tensor::<f64>::randn(vec![10, 8], 1.0, &mut rng);
    out.push(("beta = 0 injection", inject(&o, &f, 0.0)? == o));

    let mut store = ParamStore::<f64>::new();
    let grid = Grid { t: 2, h: 3, w: 2 };
    let block = TransformerBlock::new(&mut store, "blk", 16, 8, FeatureKind::ScLeaky, &mut rng)?;
    for id in block.output_projections() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(shape);
    }
    let tokens = Tensor::<f64>::randn(vec![grid.len(), 16], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(tokens.clone());
    let yv = block.forward(&mut tape, &store, xv, grid)?;
    out.push(("zero-projection transformer block", tape.value(yv) == &tokens));

    for kind in [StageKind::FusedMBConv, StageKind::MBConv] {
        let mut store = ParamStore::<f64>::new();
        let stage = ConvStage::new(&mut store, "s", kind, 4, &mut rng);
        for id in stage.projection() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
        let x = Tensor::<f64>::randn(vec![2, 4, 5, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = stage.forward(&mut tape, &store, xv)?;
        let name = match kind {
            StageKind::FusedMBConv => "zero-projection Fused-MBConv",
            StageKind::MBConv => "zero-projection MBConv",
        };
        out.push((name, tape.value(yv) == &x));
    }
    Ok(out)
}

pub fn check_structural() -> Check {
    Check::from_result(
        "structural identities",
        structural_identities().map(|r| {
            let failed: Vec<&str> = r.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
            let detail = if failed.is_empty() {
                format!("{} identities bit-exact", r.len())
            } else {
                format!("not exact: {}", failed.join(", "))
            };
            Check::new("structural identities", failed.is_empty(), detail)
        }),
    )
}

// ---------------------------------------------------------------- loss contract

pub fn loss_contract() -> Result<Vec<(&'static str, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let hr = Tensor::<f64>::uniform(vec![1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let hm = Tensor::<f64>::uniform(vec![1, 15, 2, 2], 0.0, 1.0, &mut rng);
    let sr = Tensor::<f64>::uniform(vec![1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let pred = Tensor::<f64>::uniform(vec![1, 15, 2, 2], 0.0, 1.0, &mut rng);
    let mut out = Vec::new();

    let perfect = compound_loss(&hr, &hr, &hm, &hm, DEFAULT_LAMBDA)?;
    out.push(("zero at perfect prediction", perfect.total == 0.0));

    let l0 = compound_loss(&sr, &hr, &pred, &hm, 0.0)?;
    let l1: f64 = sr.data().iter().zip(hr.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / sr.numel() as f64;
    out.push((
        "lambda = 0 is mean absolute error",
        l0.total == l0.pixel && (l0.total - l1).abs() <= 1e-15 * l1,
    ));

    out.push((
        "default lambda is 10",
        DEFAULT_LAMBDA == 10.0 && ModelConfig::default().lambda == 10.0,
    ));

    let lambdas = [0.0, 0.5, 1.0, 5.0, 10.0, 20.0, 100.0];
    let totals = lambdas
        .iter()
        .map(|&l| compound_loss(&sr, &hr, &pred, &hm, l).map(|v| v.total))
        .collect::<Result<Vec<_>>>()?;
    out.push(("monotone in lambda", totals.windows(2).all(|w| w[1] > w[0])));
    Ok(out)
}

pub fn check_loss_contract() -> Check {
    Check::from_result(
        "loss contract",
        loss_contract().map(|r| {
            let failed: Vec<&str> = r.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
            let detail = if failed.is_empty() {
                r.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            } else {
                format!("violated: {}", failed.join(", "))
            };
            Check::new("loss contract", failed.is_empty(), detail)
        }),
    )
}

// ---------------------------------------------------------------- metrics

pub fn metric_sanity() -> Result<(f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let a = Tensor::<f64>::uniform(vec![3, 24, 24], 0.0, 0.9, &mut rng);
    let b = a.map(|v| v + 1.0 / 16.0);
    let p = psnr(&a, &b, 1.0)?;
    let s = ssim(&a, &a)?;
    let h = 120.0;
    let tau = 0.2;
    let truth = vec![(50.0, 60.0), (10.5, 80.25), (100.0, 3.0)];
    let at: Vec<_> = truth.iter().map(|&(x, y)| (x + tau * h, y)).collect();
    let beyond: Vec<_> = truth.iter().map(|&(x, y)| (x, y + 2.0 * tau * h)).collect();
    Ok((p, s, pck(&at, &truth, h, tau)?, pck(&beyond, &truth, h, tau)?))
}

pub fn check_metrics() -> Check {
    Check::from_result(
        "metric sanity",
        metric_sanity().map(|(p, s, inside, outside)| {
            let expect = 10.0 * 256f64.log10();
            Check::new(
                "metric sanity",
                (p - expect).abs() < 0.01 && s == 1.0 && inside == 1.0 && outside == 0.0,
                format!("psnr offset 1/16 {p:.4} dB, ssim(a,a) {s}, pck at tau {inside}, at 2 tau {outside}"),
            )
        }),
    )
}

/// Every dataset-free check, in report order. `timing` adds the wall-clock
/// benchmark, which takes several seconds.
pub fn run_all(timing: bool) -> Vec<Check> {
    let mut out = vec![check_oracle(), check_madds()];
    if timing {
        out.push(check_wall_time());
    }
    out.extend(op_gradient_checks());
    out.extend(block_gradient_checks());
    out.push(check_sc_leaky_contract());
    out.push(check_normalization());
    out.push(check_structural());
    out.push(check_loss_contract());
    out.push(check_metrics());
    out
}

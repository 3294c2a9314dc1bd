//! Timing and operation-count comparison of linear and softmax attention.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_linear, FeatureKind, FeatureMap, MaddCounter, ALPHA_INIT, ATTN_EPS};
use crate::error::{invalid, Result};
use crate::kernels::dot;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchKernel {
    LinearElu1,
    LinearRelu,
    LinearScLeaky,
    Softmax,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 4] = [Self::LinearElu1, Self::LinearRelu, Self::LinearScLeaky, Self::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearScLeaky => "linear-scleaky",
            Self::LinearElu1 => "linear-elu1",
            Self::LinearRelu => "linear-relu",
            Self::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn feature_map(self) -> Option<FeatureMap> {
        match self {
            Self::LinearScLeaky => Some(FeatureMap::new(FeatureKind::ScLeaky, ALPHA_INIT)),
            Self::LinearElu1 => Some(FeatureMap::new(FeatureKind::Elu1, ALPHA_INIT)),
            Self::LinearRelu => Some(FeatureMap::new(FeatureKind::Relu, ALPHA_INIT)),
            Self::Softmax => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kernel: BenchKernel,
    pub n: usize,
    pub d_h: usize,
    pub wall_ns_median: u64,
    pub madds: u64,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub d_h: usize,
    pub reps: usize,
    pub kernels: Vec<BenchKernel>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![256, 512, 1024, 2048, 4096],
            d_h: 32,
            reps: 11,
            kernels: BenchKernel::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// `softmax(QKᵀ/√d)·V`, row-max stabilized.
pub fn attention_softmax<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    counter: &mut MaddCounter,
) -> Result<Tensor<T>> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0] {
        return Err(crate::error::mismatch("softmax attention", q.shape(), k.shape()));
    }
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let (nk, dv) = (k.shape()[0], v.shape()[1]);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); nq * dv];
    let mut s = vec![T::zero(); nk];
    for i in 0..nq {
        let qi = &q.data()[i * d..(i + 1) * d];
        let mut m = T::neg_infinity();
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = dot(qi, &k.data()[j * d..(j + 1) * d]) * scale;
            m = m.max(*sj);
        }
        let mut z = T::zero();
        for sj in s.iter_mut() {
            *sj = (*sj - m).exp();
            z += *sj;
        }
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (j, &sj) in s.iter().enumerate() {
            let w = sj / z;
            for (o, &x) in oi.iter_mut().zip(&v.data()[j * dv..(j + 1) * dv]) {
                *o += w * x;
            }
        }
    }
    counter.add(nq * nk * d + nq * nk + nq * nk * dv);
    Tensor::new(vec![nq, dv], out)
}

fn run_once(kernel: BenchKernel, q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<(Tensor<f32>, u64)> {
    let mut c = MaddCounter::default();
    let o = match kernel.feature_map() {
        Some(phi) => attention_linear(q, k, v, phi, ATTN_EPS, &mut c)?,
        None => attention_softmax(q, k, v, &mut c)?,
    };
    Ok((o, c.0))
}

/// Median wall time over `reps` timed runs after one discarded warmup.
/// Records are sorted by (kernel name, N).
pub fn bench_attention(config: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if config.reps < 11 {
        return Err(invalid(
            "bench_attention",
            format!("need at least 11 repetitions, got {}", config.reps),
        ));
    }
    if config.d_h == 0 || config.ns.contains(&0) {
        return Err(invalid(
            "bench_attention",
            "sequence length and head width must be positive",
        ));
    }
    let mut records = Vec::new();
    for &n in &config.ns {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ n as u64);
        let q = Tensor::<f32>::randn(vec![n, config.d_h], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(vec![n, config.d_h], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(vec![n, config.d_h], 1.0, &mut rng);
        for &kernel in &config.kernels {
            let (warm, madds) = run_once(kernel, &q, &k, &v)?;
            std::hint::black_box(&warm);
            let mut times: Vec<u64> = (0..config.reps)
                .map(|_| {
                    let t0 = Instant::now();
                    let r = run_once(kernel, &q, &k, &v);
                    let dt = t0.elapsed().as_nanos() as u64;
                    std::hint::black_box(&r);
                    dt
                })
                .collect();
            times.sort_unstable();
            records.push(BenchRecord {
                kernel,
                n,
                d_h: config.d_h,
                wall_ns_median: times[times.len() / 2],
                madds,
            });
            log::debug!("{} N={n}: {} ns", kernel.name(), times[times.len() / 2]);
        }
    }
    records.sort_by(|a, b| (a.kernel.name(), a.n).cmp(&(b.kernel.name(), b.n)));
    Ok(records)
}

pub const CSV_HEADER: &str = "kernel,N,D_h,wall_ns_median,madds";

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.kernel.name(),
            r.n,
            r.d_h,
            r.wall_ns_median,
            r.madds
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f64>::randn(vec![6, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![9, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::ones(vec![9, 3]);
        let mut c = MaddCounter::default();
        let o = attention_softmax(&q, &k, &v, &mut c).unwrap();
        assert!(o.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert_eq!(c.0, (6 * 9 * 4 + 6 * 9 + 6 * 9 * 3) as u64);
    }

    #[test]
    fn names_round_trip_and_sorted_csv() {
        for k in BenchKernel::ALL {
            assert_eq!(BenchKernel::parse(k.name()), Some(k));
        }
        let cfg = BenchConfig {
            ns: vec![32, 16],
            d_h: 4,
            ..BenchConfig::default()
        };
        let recs = bench_attention(&cfg).unwrap();
        assert_eq!(recs.len(), 8);
        let keys: Vec<(&str, usize)> = recs.iter().map(|r| (r.kernel.name(), r.n)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let csv = to_csv(&recs);
        assert!(csv.starts_with("kernel,N,D_h,wall_ns_median,madds\n"));
        assert_eq!(csv.lines().count(), 9);
        assert!(bench_attention(&BenchConfig { reps: 5, ..cfg }).is_err());
    }
}

//! Similarity-form attention with non-negative feature maps.
//!
//! With `Sim(q, k) = φ(q)·φ(k)ᵀ`, the per-query normalized sum
//! `O_i = Σ_j Sim(Q_i, K_j) V_j / Σ_j Sim(Q_i, K_j)` can be regrouped around
//! two key-side statistics, `kv = Σ_j φ(K_j)ᵀ V_j` and `ksum = Σ_j φ(K_j)ᵀ`,
//! that every query reuses. [`attention_naive`] evaluates the quadratic form
//! and serves as the oracle for [`attention_linear`].

use rand::Rng;

use crate::error::{invalid, mismatch, Result};
use crate::kernels::dot;
use crate::optim::ParamStore;
use crate::patch::{Grid, TokenSequence};
use crate::scalar::Real;
use crate::tape::{sc_leaky, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Denominator stabilizer shared by both attention formulations.
pub const ATTN_EPS: f64 = 1e-6;

/// Initial truncation rate of the shifted-clipped leaky map.
pub const ALPHA_INIT: f64 = 0.01;

/// Slope of the leaky activation used in MLPs and convolution blocks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Which similarity feature map a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    ScLeaky,
    Relu,
    Elu1,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::ScLeaky => "scleaky",
            FeatureKind::Relu => "relu",
            FeatureKind::Elu1 => "elu1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scleaky" => Some(FeatureKind::ScLeaky),
            "relu" => Some(FeatureKind::Relu),
            "elu1" => Some(FeatureKind::Elu1),
            _ => None,
        }
    }
}

/// A concrete feature map `φ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureMap {
    /// `x+1` for `x>0`, `αx+1` on `[−1/α, 0]`, `0` below.
    ScLeaky {
        alpha: f64,
    },
    Relu,
    Elu1,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, alpha: f64) -> Self {
        match kind {
            FeatureKind::ScLeaky => FeatureMap::ScLeaky { alpha },
            FeatureKind::Relu => FeatureMap::Relu,
            FeatureKind::Elu1 => FeatureMap::Elu1,
        }
    }

    #[inline]
    pub fn apply<T: Real>(&self, x: T) -> T {
        match *self {
            FeatureMap::ScLeaky { alpha } => sc_leaky(x, T::of(alpha)),
            FeatureMap::Relu => x.max(T::zero()),
            FeatureMap::Elu1 => {
                if x > T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn map_tensor<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }
}

/// Truncation rate `α = exp(a)` and fixed offset `δ = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScLeakyParams {
    pub log_alpha: f64,
}

impl ScLeakyParams {
    pub const DELTA: f64 = 1.0;

    pub fn with_alpha(alpha: f64) -> Self {
        Self { log_alpha: alpha.ln() }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

impl Default for ScLeakyParams {
    fn default() -> Self {
        Self::with_alpha(ALPHA_INIT)
    }
}

pub fn sc_leaky_relu<T: Real>(x: &Tensor<T>, params: ScLeakyParams) -> Tensor<T> {
    FeatureMap::ScLeaky { alpha: params.alpha() }.map_tensor(x)
}

/// Multiply-add counter threaded through the instrumented kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaddCounter(pub u64);

impl MaddCounter {
    #[inline]
    pub fn add(&mut self, n: usize) {
        self.0 += n as u64;
    }
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(mismatch("attention", qs, ks));
    }
    Ok((qs[0], qs[1], vs[1]))
}

/// Quadratic-cost evaluation: explicit similarities for every (query, key) pair.
/// With `eps = 0`, a query whose similarities are all zero is an error.
pub fn attention_naive<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    phi: FeatureMap,
    eps: f64,
    counter: &mut MaddCounter,
) -> Result<Tensor<T>> {
    let (nq, d, dv) = check_qkv(q, k, v)?;
    let nk = k.shape()[0];
    let fq = phi.map_tensor(q);
    let fk = phi.map_tensor(k);
    let eps = T::of(eps);
    let mut out = vec![T::zero(); nq * dv];
    let mut sims = vec![T::zero(); nk];
    for i in 0..nq {
        let qi = &fq.data()[i * d..(i + 1) * d];
        let mut den = T::zero();
        for (j, s) in sims.iter_mut().enumerate() {
            *s = dot(qi, &fk.data()[j * d..(j + 1) * d]);
            den += *s;
        }
        counter.add(nk * d + nk);
        if den == T::zero() && eps == T::zero() {
            return Err(invalid(
                "attention_naive",
                format!("query {i} has zero total similarity"),
            ));
        }
        let den = den + eps;
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (j, &s) in sims.iter().enumerate() {
            let w = s / den;
            for (o, &vj) in oi.iter_mut().zip(&v.data()[j * dv..(j + 1) * dv]) {
                *o += w * vj;
            }
        }
        counter.add(nk * dv);
    }
    Tensor::new(vec![nq, dv], out)
}

/// Normalized attention weights `Sim(Q_i,K_j) / Σ_j Sim(Q_i,K_j)` (N_q × N_k).
/// Rows whose total similarity does not exceed `eps` are left at zero.
pub fn attention_weights<T: Real>(q: &Tensor<T>, k: &Tensor<T>, phi: FeatureMap, eps: f64) -> Result<Tensor<T>> {
    if q.ndim() != 2 || k.ndim() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(mismatch("attention_weights", q.shape(), k.shape()));
    }
    let (nq, nk, d) = (q.shape()[0], k.shape()[0], q.shape()[1]);
    let fq = phi.map_tensor(q);
    let fk = phi.map_tensor(k);
    let mut w = vec![T::zero(); nq * nk];
    for i in 0..nq {
        let qi = &fq.data()[i * d..(i + 1) * d];
        let row = &mut w[i * nk..(i + 1) * nk];
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, &fk.data()[j * d..(j + 1) * d]);
        }
        let den: T = row.iter().copied().sum();
        if den.as_f64() > eps {
            row.iter_mut().for_each(|r| *r /= den);
        } else {
            row.iter_mut().for_each(|r| *r = T::zero());
        }
    }
    Tensor::new(vec![nq, nk], w)
}

/// Key-side statistics shared by every query.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalStats<T> {
    /// `Σ_j φ(K_j)ᵀ V_j`, `d × d_v`
    pub kv: Tensor<T>,
    /// `Σ_j φ(K_j)ᵀ`, length `d`
    pub ksum: Tensor<T>,
}

impl<T: Real> GlobalStats<T> {
    /// One pass over the keys.
    pub fn accumulate(k: &Tensor<T>, v: &Tensor<T>, phi: FeatureMap, counter: &mut MaddCounter) -> Result<Self> {
        if k.ndim() != 2 || v.ndim() != 2 || k.shape()[0] != v.shape()[0] {
            return Err(mismatch("global stats", k.shape(), v.shape()));
        }
        let (n, d, dv) = (k.shape()[0], k.shape()[1], v.shape()[1]);
        let mut kv = vec![T::zero(); d * dv];
        let mut ksum = vec![T::zero(); d];
        let mut fk = vec![T::zero(); d];
        for j in 0..n {
            for (f, &x) in fk.iter_mut().zip(&k.data()[j * d..(j + 1) * d]) {
                *f = phi.apply(x);
            }
            let vj = &v.data()[j * dv..(j + 1) * dv];
            for a in 0..d {
                ksum[a] += fk[a];
                let row = &mut kv[a * dv..(a + 1) * dv];
                for (r, &x) in row.iter_mut().zip(vj) {
                    *r += fk[a] * x;
                }
            }
        }
        counter.add(n * d * dv + n * d);
        Ok(Self {
            kv: Tensor::new(vec![d, dv], kv)?,
            ksum: Tensor::new(vec![d], ksum)?,
        })
    }
}

/// Linear-cost evaluation: `O_i = φ(Q_i)·kv / (φ(Q_i)·ksum + ε)`.
pub fn attention_linear<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    phi: FeatureMap,
    eps: f64,
    counter: &mut MaddCounter,
) -> Result<Tensor<T>> {
    let (nq, d, dv) = check_qkv(q, k, v)?;
    let stats = GlobalStats::accumulate(k, v, phi, counter)?;
    let eps = T::of(eps);
    let mut out = vec![T::zero(); nq * dv];
    let mut fq = vec![T::zero(); d];
    for i in 0..nq {
        for (f, &x) in fq.iter_mut().zip(&q.data()[i * d..(i + 1) * d]) {
            *f = phi.apply(x);
        }
        let den = dot(&fq, stats.ksum.data());
        if den == T::zero() && eps == T::zero() {
            return Err(invalid(
                "attention_linear",
                format!("query {i} has zero total similarity"),
            ));
        }
        let den = den + eps;
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (a, &fa) in fq.iter().enumerate() {
            for (o, &x) in oi.iter_mut().zip(&stats.kv.data()[a * dv..(a + 1) * dv]) {
                *o += fa * x;
            }
        }
        oi.iter_mut().for_each(|o| *o /= den);
    }
    counter.add(nq * d * dv + nq * d);
    Tensor::new(vec![nq, dv], out)
}

// ------------------------------------------------------------------ tape versions

/// Applies `kind` elementwise; `alpha` (one element, positive) is only read by `ScLeaky`.
pub fn phi_var<T: Real>(tape: &mut Tape<T>, x: Var, kind: FeatureKind, alpha: Var) -> Result<Var> {
    match kind {
        FeatureKind::ScLeaky => tape.sc_leaky_relu(x, alpha),
        FeatureKind::Relu => tape.relu(x),
        FeatureKind::Elu1 => tape.elu1(x),
    }
}

/// Linear attention for one head on a tape. `q, k: N×d`, `v: N×d_v`.
pub fn linear_attention_var<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    kind: FeatureKind,
    alpha: Var,
    eps: f64,
) -> Result<Var> {
    let fq = phi_var(tape, q, kind, alpha)?;
    let fk = phi_var(tape, k, kind, alpha)?;
    let fkt = tape.transpose(fk)?;
    let kv = tape.matmul(fkt, v)?;
    let d = tape.shape(fk)[1];
    let n = tape.shape(fq)[0];
    let dv = tape.shape(v)[1];
    let ksum = tape.sum(fk, &[0])?;
    let ksum = tape.reshape(ksum, vec![d, 1])?;
    let num = tape.matmul(fq, kv)?;
    let den = tape.matmul(fq, ksum)?;
    let den = tape.add_scalar(den, T::of(eps))?;
    let den = tape.expand(den, vec![n, dv])?;
    tape.div(num, den)
}

/// Folds `N×D` tokens to per-frame maps `T_p×D×H_p×W_p`.
pub fn tokens_to_frames<T: Real>(tape: &mut Tape<T>, x: Var, grid: Grid) -> Result<Var> {
    let d = tape.shape(x)[1];
    let m = tape.reshape(x, vec![grid.t, grid.h, grid.w, d])?;
    tape.permute(m, &[0, 3, 1, 2])
}

pub fn frames_to_tokens<T: Real>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let s = tape.shape(m).to_vec();
    let x = tape.permute(m, &[0, 2, 3, 1])?;
    tape.reshape(x, vec![s[0] * s[2] * s[3], s[1]])
}

/// Depthwise kernels producing the second and third token groups.
#[derive(Clone, Debug)]
pub struct MultiScale {
    pub dw3: ParamId,
    pub dw5: ParamId,
}

impl MultiScale {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        // near-identity kernels: unit center plus small noise
        let mut kernel = |k: usize| {
            let mut w = Tensor::<T>::randn(vec![dim, 1, k, k], 0.05, rng);
            let c = k / 2;
            for o in 0..dim {
                w.data_mut()[o * k * k + c * k + c] += T::one();
            }
            w
        };
        let w3 = kernel(3);
        let w5 = kernel(5);
        Self {
            dw3: store.add(format!("{prefix}.dw3"), w3),
            dw5: store.add(format!("{prefix}.dw5"), w5),
        }
    }

    /// Original tokens plus their 3×3 and 5×5 per-frame depthwise aggregations.
    pub fn groups_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        grid: Grid,
    ) -> Result<[Var; 3]> {
        let d = tape.shape(x)[1];
        if tape.shape(x)[0] != grid.len() {
            return Err(mismatch("multiscale_groups", tape.shape(x), &[grid.len(), d]));
        }
        let frames = tokens_to_frames(tape, x, grid)?;
        let w3 = store.var(tape, self.dw3);
        let w5 = store.var(tape, self.dw5);
        let g3 = tape.conv2d(frames, w3, None, 1, 1, d)?;
        let g5 = tape.conv2d(frames, w5, None, 1, 2, d)?;
        let g3 = frames_to_tokens(tape, g3)?;
        let g5 = frames_to_tokens(tape, g5)?;
        Ok([x, g3, g5])
    }
}

/// The three token groups of a model-width sequence.
pub fn multiscale_groups<T: Real>(
    seq: &TokenSequence<T>,
    ms: &MultiScale,
    store: &ParamStore<T>,
) -> Result<[TokenSequence<T>; 3]> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let gs = ms.groups_var(&mut tape, store, x, seq.grid)?;
    Ok(gs.map(|g| TokenSequence {
        tokens: tape.value(g).clone(),
        ..seq.clone()
    }))
}

/// Heads per token group: as even as possible, earlier groups first.
pub fn head_split(heads: usize) -> [usize; 3] {
    let base = heads / 3;
    let extra = heads % 3;
    [0, 1, 2].map(|g| base + usize::from(g < extra))
}

/// Multi-head linear attention over multi-scale token groups.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub split: [usize; 3],
    pub kind: FeatureKind,
    /// Fused `[W_Q | W_K | W_V]` per group, `D × 3·n_g·d_h`.
    pub w_qkv: [ParamId; 3],
    pub multiscale: MultiScale,
    pub log_alpha: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl AttentionLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        kind: FeatureKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(
                "attention layer",
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        let head_dim = dim / heads;
        let split = head_split(heads);
        let std = (1.0 / dim as f64).sqrt();
        let w_qkv = [0, 1, 2].map(|g| {
            store.add(
                format!("{prefix}.w_qkv{g}"),
                Tensor::randn(vec![dim, 3 * split[g] * head_dim], std, rng),
            )
        });
        let multiscale = MultiScale::new(store, prefix, dim, rng);
        let log_alpha = store.add(format!("{prefix}.log_alpha"), Tensor::scalar(T::of(ALPHA_INIT.ln())));
        let w_out = store.add(format!("{prefix}.w_out"), Tensor::randn(vec![dim, dim], 0.5 * std, rng));
        let b_out = store.add(format!("{prefix}.b_out"), Tensor::zeros(vec![dim]));
        Ok(Self {
            dim,
            heads,
            head_dim,
            split,
            kind,
            w_qkv,
            multiscale,
            log_alpha,
            w_out,
            b_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, grid: Grid) -> Result<Var> {
        if tape.shape(x) != [grid.len(), self.dim] {
            return Err(mismatch("attention layer", tape.shape(x), &[grid.len(), self.dim]));
        }
        let groups = self.multiscale.groups_var(tape, store, x, grid)?;
        let la = store.var(tape, self.log_alpha);
        let alpha = tape.exp(la)?;
        let dh = self.head_dim;
        let mut heads = Vec::with_capacity(self.heads);
        for (g, &xg) in groups.iter().enumerate() {
            let ng = self.split[g];
            if ng == 0 {
                continue;
            }
            let w = store.var(tape, self.w_qkv[g]);
            let qkv = tape.matmul(xg, w)?;
            for h in 0..ng {
                let q = tape.narrow(qkv, 1, h * dh, dh)?;
                let k = tape.narrow(qkv, 1, (ng + h) * dh, dh)?;
                let v = tape.narrow(qkv, 1, (2 * ng + h) * dh, dh)?;
                heads.push(linear_attention_var(tape, q, k, v, self.kind, alpha, ATTN_EPS)?);
            }
        }
        let cat = tape.concat(&heads, 1)?;
        let wo = store.var(tape, self.w_out);
        let bo = store.var(tape, self.b_out);
        tape.linear(cat, wo, Some(bo))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub dim: usize,
    pub ln1: (ParamId, ParamId),
    pub attn: AttentionLayer,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const MLP_EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        kind: FeatureKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ln = |store: &mut ParamStore<T>, name: &str| {
            (
                store.add(format!("{prefix}.{name}.gamma"), Tensor::ones(vec![dim])),
                store.add(format!("{prefix}.{name}.beta"), Tensor::zeros(vec![dim])),
            )
        };
        let ln1 = ln(store, "ln1");
        let attn = AttentionLayer::new(store, &format!("{prefix}.attn"), dim, heads, kind, rng)?;
        let ln2 = ln(store, "ln2");
        let hidden = MLP_EXPANSION * dim;
        let w1 = store.add(
            format!("{prefix}.mlp.w1"),
            Tensor::randn(vec![dim, hidden], (1.0 / dim as f64).sqrt(), rng),
        );
        let b1 = store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![hidden]));
        let w2 = store.add(
            format!("{prefix}.mlp.w2"),
            Tensor::randn(vec![hidden, dim], 0.5 * (1.0 / hidden as f64).sqrt(), rng),
        );
        let b2 = store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![dim]));
        Ok(Self {
            dim,
            ln1,
            attn,
            ln2,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Output projections of attention and MLP; zeroing them makes the block the identity.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.attn.w_out, self.attn.b_out, self.w2, self.b2]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, grid: Grid) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.dim {
            return Err(mismatch("transformer block", tape.shape(x), &[grid.len(), self.dim]));
        }
        let (g1, b1) = (store.var(tape, self.ln1.0), store.var(tape, self.ln1.1));
        let h = tape.layer_norm(x, g1, b1, T::of(LN_EPS))?;
        let a = self.attn.forward(tape, store, h, grid)?;
        let x = tape.add(x, a)?;
        let (g2, b2) = (store.var(tape, self.ln2.0), store.var(tape, self.ln2.1));
        let h = tape.layer_norm(x, g2, b2, T::of(LN_EPS))?;
        let (w1, bb1) = (store.var(tape, self.w1), store.var(tape, self.b1));
        let h = tape.linear(h, w1, Some(bb1))?;
        let h = tape.leaky(h, T::of(LEAKY_SLOPE))?;
        let (w2, bb2) = (store.var(tape, self.w2), store.var(tape, self.b2));
        let h = tape.linear(h, w2, Some(bb2))?;
        tape.add(x, h)
    }
}

/// Runs one block on a token sequence outside of training.
pub fn transformer_block<T: Real>(
    seq: &TokenSequence<T>,
    block: &TransformerBlock,
    store: &ParamStore<T>,
) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let y = block.forward(&mut tape, store, x, seq.grid)?;
    Ok(TokenSequence {
        tokens: tape.value(y).clone(),
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{Patch, TokenWidth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phi() -> FeatureMap {
        FeatureMap::ScLeaky { alpha: 0.01 }
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::randn(vec![6, 4], 1.0, &mut rng);
        let row = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut rng);
        let k = Tensor::from_fn(vec![6, 4], |i| row.data()[i % 4]);
        let v = Tensor::<f64>::randn(vec![6, 3], 1.0, &mut rng);
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..6).map(|j| v.at(&[j, c])).sum::<f64>() / 6.0)
            .collect();
        for f in [attention_naive::<f64>, attention_linear::<f64>] {
            let o = f(&q, &k, &v, phi(), ATTN_EPS, &mut MaddCounter::default()).unwrap();
            for i in 0..6 {
                for (c, m) in mean.iter().enumerate() {
                    assert!((o.at(&[i, c]) - m).abs() < 1e-5 * (1.0 + m.abs()));
                }
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::<f64>::new(vec![1, 2], vec![0.3, -4.0]).unwrap();
        let k = Tensor::<f64>::new(vec![1, 2], vec![2.0, 1.0]).unwrap();
        let v = Tensor::<f64>::new(vec![1, 3], vec![7.0, -1.0, 0.5]).unwrap();
        let o = attention_naive(&q, &k, &v, phi(), 0.0, &mut MaddCounter::default()).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn zero_denominator_flagged_without_eps() {
        let q = Tensor::<f64>::full(vec![2, 2], -500.0);
        let k = Tensor::<f64>::full(vec![3, 2], -500.0);
        let v = Tensor::<f64>::ones(vec![3, 2]);
        let mut c = MaddCounter::default();
        assert!(attention_naive(&q, &k, &v, phi(), 0.0, &mut c).is_err());
        assert!(attention_linear(&q, &k, &v, phi(), 0.0, &mut c).is_err());
        let o = attention_naive(&q, &k, &v, phi(), ATTN_EPS, &mut c).unwrap();
        assert!(o.all_finite());
    }

    #[test]
    fn linear_madds_are_exactly_linear_in_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let count = |n: usize, rng: &mut ChaCha8Rng| {
            let q = Tensor::<f32>::randn(vec![n, 8], 1.0, rng);
            let mut c = MaddCounter::default();
            attention_linear(&q, &q, &q, phi(), ATTN_EPS, &mut c).unwrap();
            c.0
        };
        let (a, b) = (count(64, &mut rng), count(128, &mut rng));
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn head_split_is_three_three_two() {
        assert_eq!(head_split(8), [3, 3, 2]);
        assert_eq!(head_split(3), [1, 1, 1]);
    }

    fn tiny_seq(rng: &mut ChaCha8Rng, d: usize) -> TokenSequence<f64> {
        TokenSequence {
            tokens: Tensor::randn(vec![2 * 3 * 2, d], 1.0, rng),
            grid: Grid { t: 2, h: 3, w: 2 },
            patch: Patch::default(),
            source_channels: d / 16,
            width: TokenWidth::Model,
        }
    }

    #[test]
    fn identity_depthwise_kernels_reproduce_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let ms = MultiScale::new(&mut store, "ms", 16, &mut rng);
        for (id, k) in [(ms.dw3, 3), (ms.dw5, 5)] {
            *store.get_mut(id) = Tensor::from_fn(vec![16, 1, k, k], |i| {
                if i % (k * k) == (k / 2) * k + k / 2 {
                    1.0
                } else {
                    0.0
                }
            });
        }
        let seq = tiny_seq(&mut rng, 16);
        let groups = multiscale_groups(&seq, &ms, &store).unwrap();
        for g in &groups {
            assert_eq!(g.tokens, seq.tokens);
        }
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "blk", 16, 8, FeatureKind::ScLeaky, &mut rng).unwrap();
        for id in block.output_projections() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
        let seq = tiny_seq(&mut rng, 16);
        let out = transformer_block(&seq, &block, &store).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "blk", 16, 8, FeatureKind::Relu, &mut rng).unwrap();
        let seq = tiny_seq(&mut rng, 16);
        let out = transformer_block(&seq, &block, &store).unwrap();
        assert_eq!(out.tokens.shape(), seq.tokens.shape());
        assert!(out.tokens.all_finite());
    }
}

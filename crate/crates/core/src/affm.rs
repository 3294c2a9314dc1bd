//! Adaptive feature fusion of transformer tokens with CNN feature maps.
//!
//! Tokens are folded back to map form, adapted to the CNN width, concatenated
//! with the CNN features, gated per channel by `sigmoid(W_1 · GAP(·))`, reduced
//! by a 3×3 convolution, adapted back and re-tokenized. The result enters the
//! next transformer block through `out + β·fused` with `β` starting at zero.

use rand::Rng;

use crate::error::{invalid, mismatch, Result};
use crate::optim::ParamStore;
use crate::patch::{fold3d, fold3d_var, unfold3d, unfold3d_var, Grid, Patch};
use crate::scalar::Real;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FusionStage {
    pub dim: usize,
    pub channels: usize,
    pub patch: Patch,
    /// 1×1 conv from folded token channels (`D / patch volume`) to `C`.
    pub adapt_in: (ParamId, ParamId),
    /// Channel-attention map, `2C × 2C`.
    pub w1: ParamId,
    /// 3×3 conv `2C → C`.
    pub reduce: (ParamId, ParamId),
    /// 1×1 conv from `C` back to folded token channels.
    pub adapt_out: (ParamId, ParamId),
    pub beta: ParamId,
}

impl FusionStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        channels: usize,
        patch: Patch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !dim.is_multiple_of(patch.volume()) {
            return Err(invalid(
                "fusion stage",
                format!("token width {dim} not divisible by patch volume {}", patch.volume()),
            ));
        }
        let folded = dim / patch.volume();
        let c = channels;
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            let std = 1.0 / ((cin * k * k) as f64).sqrt();
            (
                store.add(
                    format!("{prefix}.{name}.w"),
                    Tensor::randn(vec![cout, cin, k, k], std, rng),
                ),
                store.add(format!("{prefix}.{name}.b"), Tensor::zeros(vec![cout])),
            )
        };
        let adapt_in = conv("adapt_in", c, folded, 1);
        let reduce = conv("reduce", c, 2 * c, 3);
        let adapt_out = conv("adapt_out", folded, c, 1);
        let w1 = store.add(
            format!("{prefix}.w1"),
            Tensor::randn(vec![2 * c, 2 * c], 1.0 / ((2 * c) as f64).sqrt(), rng),
        );
        let beta = store.add(format!("{prefix}.beta"), Tensor::scalar(T::zero()));
        Ok(Self {
            dim,
            channels,
            patch,
            adapt_in,
            w1,
            reduce,
            adapt_out,
            beta,
        })
    }

    fn conv<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        p: (ParamId, ParamId),
        pad: usize,
    ) -> Result<Var> {
        let w = store.var(tape, p.0);
        let b = store.var(tape, p.1);
        tape.conv2d(x, w, Some(b), 1, pad, 1)
    }

    /// Channel gate `sigmoid(GAP(x) · W_1)`, GAP over frames and space jointly.
    pub fn gate_var<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cat: Var) -> Result<Var> {
        let c2 = tape.shape(cat)[1];
        let gap = tape.mean(cat, &[0, 2, 3])?;
        let gap = tape.reshape(gap, vec![1, c2])?;
        let w1 = store.var(tape, self.w1);
        let z = tape.matmul(gap, w1)?;
        tape.sigmoid(z)
    }

    /// `F^M` in token form from transformer tokens `N×D` and CNN maps `T×C×H×W`.
    pub fn fuse_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        cnn: Var,
        grid: Grid,
    ) -> Result<Var> {
        let map = fold3d_var(tape, tokens, grid, self.patch)?;
        let map = Self::conv(tape, store, map, self.adapt_in, 0)?;
        if tape.shape(map) != tape.shape(cnn) {
            return Err(mismatch("affm_fuse", tape.shape(map), tape.shape(cnn)));
        }
        let cat = tape.concat(&[map, cnn], 1)?;
        let shape = tape.shape(cat).to_vec();
        let gate = self.gate_var(tape, store, cat)?;
        let gate = tape.reshape(gate, vec![1, shape[1], 1, 1])?;
        let gate = tape.expand(gate, shape)?;
        let gated = tape.mul(cat, gate)?;
        let fused = Self::conv(tape, store, gated, self.reduce, 1)?;
        let back = Self::conv(tape, store, fused, self.adapt_out, 0)?;
        let (tok, _) = unfold3d_var(tape, back, self.patch)?;
        Ok(tok)
    }

    /// `out + β·fused`.
    pub fn inject_var<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, out: Var, fused: Var) -> Result<Var> {
        let beta = store.var(tape, self.beta);
        inject_var(tape, out, fused, beta)
    }
}

pub fn inject_var<T: Real>(tape: &mut Tape<T>, out: Var, fused: Var, beta: Var) -> Result<Var> {
    if tape.shape(out) != tape.shape(fused) {
        return Err(mismatch("inject", tape.shape(out), tape.shape(fused)));
    }
    let scaled = tape.mul(beta, fused)?;
    tape.add(out, scaled)
}

/// Folds `N×D` tokens into a `T×(D/patch volume)×H×W` map.
pub fn tokens_to_map<T: Real>(tokens: &Tensor<T>, grid: Grid, patch: Patch) -> Result<Tensor<T>> {
    fold3d(tokens, grid, patch)
}

pub fn map_to_tokens<T: Real>(map: &Tensor<T>, patch: Patch) -> Result<Tensor<T>> {
    Ok(unfold3d(map, patch)?.tokens)
}

pub fn affm_fuse<T: Real>(
    tokens: &Tensor<T>,
    cnn: &Tensor<T>,
    grid: Grid,
    stage: &FusionStage,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let c = tape.constant(cnn.clone());
    let f = stage.fuse_var(&mut tape, store, t, c, grid)?;
    Ok(tape.value(f).clone())
}

pub fn inject<T: Real>(out: &Tensor<T>, fused: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let o = tape.constant(out.clone());
    let f = tape.constant(fused.clone());
    let b = tape.scalar(beta);
    let y = inject_var(&mut tape, o, f, b)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GRID: Grid = Grid { t: 5, h: 2, w: 2 };

    #[test]
    fn token_map_shapes_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![20, 32], 1.0, &mut rng);
        let m = tokens_to_map(&x, GRID, Patch::default()).unwrap();
        assert_eq!(m.shape(), &[5, 2, 8, 8]);
        assert_eq!(map_to_tokens(&m, Patch::default()).unwrap(), x);
        assert!(tokens_to_map(&x, Grid { t: 4, h: 2, w: 2 }, Patch::default()).is_err());
    }

    #[test]
    fn zero_w1_halves_features_before_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let stage = FusionStage::new(&mut store, "f", 32, 3, Patch::default(), &mut rng).unwrap();
        *store.get_mut(stage.w1) = Tensor::zeros(vec![6, 6]);
        let mut tape = Tape::new();
        let cat = tape.constant(Tensor::randn(vec![5, 6, 8, 8], 1.0, &mut rng));
        let g = stage.gate_var(&mut tape, &store, cat).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn beta_zero_injection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = Tensor::<f64>::randn(vec![20, 32], 1.0, &mut rng);
        let fused = Tensor::<f64>::randn(vec![20, 32], 1.0, &mut rng);
        assert_eq!(inject(&out, &fused, 0.0).unwrap(), out);
        assert_eq!(inject(&out, &Tensor::zeros(vec![20, 32]), 1.0).unwrap(), out);
        let bad = Tensor::<f64>::zeros(vec![20, 16]);
        assert!(inject(&out, &bad, 1.0).is_err());
    }

    #[test]
    fn fuse_returns_token_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let stage = FusionStage::new(&mut store, "f", 32, 4, Patch::default(), &mut rng).unwrap();
        let tok = Tensor::<f64>::randn(vec![20, 32], 1.0, &mut rng);
        let cnn = Tensor::<f64>::randn(vec![5, 4, 8, 8], 1.0, &mut rng);
        let f = affm_fuse(&tok, &cnn, GRID, &stage, &store).unwrap();
        assert_eq!(f.shape(), &[20, 32]);
        let wrong = Tensor::<f64>::randn(vec![5, 3, 8, 8], 1.0, &mut rng);
        assert!(affm_fuse(&tok, &wrong, GRID, &stage, &store).is_err());
    }
}

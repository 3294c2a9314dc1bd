//! 3-D patch tokenization of `T×C×H×W` feature maps, positional encoding,
//! and sub-pixel (pixel-shuffle) upsampling.
//!
//! A token is the flattened `(C, p_t, p_h, p_w)` block of one patch; tokens are
//! ordered row-major over patch indices `(t, h, w)`.

use crate::error::{invalid, mismatch, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub use crate::tape::{pixel_shuffle, pixel_unshuffle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Patch {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Patch {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

impl Default for Patch {
    fn default() -> Self {
        Self::new(1, 4, 4)
    }
}

/// Extents of the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid of a `T×C×H×W` map cut into `patch`-sized blocks.
    pub fn for_map(shape: &[usize], patch: Patch) -> Result<Self> {
        if shape.len() != 4 {
            return Err(invalid("unfold3d", format!("expected T×C×H×W, got {shape:?}")));
        }
        let (t, h, w) = (shape[0], shape[2], shape[3]);
        if patch.volume() == 0 || t % patch.t != 0 || h % patch.h != 0 || w % patch.w != 0 {
            return Err(invalid(
                "unfold3d",
                format!("extents {t}×{h}×{w} not divisible by patch {patch:?}"),
            ));
        }
        Ok(Self {
            t: t / patch.t,
            h: h / patch.h,
            w: w / patch.w,
        })
    }

    /// Patch coordinates `(t, h, w)` of token `n`.
    pub fn coords(&self, n: usize) -> (usize, usize, usize) {
        (n / (self.h * self.w), (n / self.w) % self.h, n % self.w)
    }
}

/// Whether a token row holds raw patch pixels or model-width features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenWidth {
    Patch,
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub grid: Grid,
    pub patch: Patch,
    pub source_channels: usize,
    pub width: TokenWidth,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

// axes of the map viewed as [Tp, pt, C, Hp, ph, Wp, pw] -> [Tp, Hp, Wp, C, pt, ph, pw]
const UNFOLD_AXES: [usize; 7] = [0, 3, 5, 2, 1, 4, 6];
const FOLD_AXES: [usize; 7] = [0, 4, 3, 1, 5, 2, 6];

fn split_shape(grid: Grid, patch: Patch, c: usize) -> Vec<usize> {
    vec![grid.t, patch.t, c, grid.h, patch.h, grid.w, patch.w]
}

fn token_shape(grid: Grid, patch: Patch, c: usize) -> Vec<usize> {
    vec![grid.t, grid.h, grid.w, c, patch.t, patch.h, patch.w]
}

pub fn unfold3d<T: Real>(map: &Tensor<T>, patch: Patch) -> Result<TokenSequence<T>> {
    let grid = Grid::for_map(map.shape(), patch)?;
    let c = map.shape()[1];
    let tokens = map
        .reshape(split_shape(grid, patch, c))?
        .permute(&UNFOLD_AXES)?
        .reshape(vec![grid.len(), c * patch.volume()])?;
    Ok(TokenSequence {
        tokens,
        grid,
        patch,
        source_channels: c,
        width: TokenWidth::Patch,
    })
}

/// Inverse of [`unfold3d`]. Token width must be a multiple of the patch volume;
/// the quotient becomes the channel count of the map.
pub fn fold3d<T: Real>(tokens: &Tensor<T>, grid: Grid, patch: Patch) -> Result<Tensor<T>> {
    let c = fold_channels(tokens.shape(), grid, patch)?;
    tokens
        .reshape(token_shape(grid, patch, c))?
        .permute(&FOLD_AXES)?
        .reshape(vec![grid.t * patch.t, c, grid.h * patch.h, grid.w * patch.w])
}

fn fold_channels(shape: &[usize], grid: Grid, patch: Patch) -> Result<usize> {
    if shape.len() != 2 || shape[0] != grid.len() || !shape[1].is_multiple_of(patch.volume()) {
        return Err(invalid(
            "fold3d",
            format!("tokens {shape:?} incompatible with grid {grid:?} and patch {patch:?}"),
        ));
    }
    Ok(shape[1] / patch.volume())
}

/// [`unfold3d`] recorded on a tape.
pub fn unfold3d_var<T: Real>(tape: &mut Tape<T>, map: Var, patch: Patch) -> Result<(Var, Grid)> {
    let grid = Grid::for_map(tape.shape(map), patch)?;
    let c = tape.shape(map)[1];
    let v = tape.reshape(map, split_shape(grid, patch, c))?;
    let v = tape.permute(v, &UNFOLD_AXES)?;
    let v = tape.reshape(v, vec![grid.len(), c * patch.volume()])?;
    Ok((v, grid))
}

/// [`fold3d`] recorded on a tape.
pub fn fold3d_var<T: Real>(tape: &mut Tape<T>, tokens: Var, grid: Grid, patch: Patch) -> Result<Var> {
    let c = fold_channels(tape.shape(tokens), grid, patch)?;
    let v = tape.reshape(tokens, token_shape(grid, patch, c))?;
    let v = tape.permute(v, &FOLD_AXES)?;
    tape.reshape(v, vec![grid.t * patch.t, c, grid.h * patch.h, grid.w * patch.w])
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(·)`.
pub fn sinusoidal_pe<T: Real>(length: usize, d_pe: usize) -> Result<Tensor<T>> {
    if !d_pe.is_multiple_of(2) {
        return Err(invalid("sinusoidal_pe", format!("width {d_pe} must be even")));
    }
    Ok(Tensor::from_fn(vec![length, d_pe], |k| {
        let (pos, j) = (k / d_pe, k % d_pe);
        let i = j / 2;
        let arg = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_pe as f64);
        T::of(if j % 2 == 0 { arg.sin() } else { arg.cos() })
    }))
}

/// Fixed sinusoidal features `concat(PE_t(t), PE_w(w), PE_h(h))` for every
/// token of `grid`: shape `N × 3·d_pe`.
pub fn positional_features<T: Real>(grid: Grid, d_pe: usize) -> Result<Tensor<T>> {
    let pt = sinusoidal_pe::<T>(grid.t, d_pe)?;
    let ph = sinusoidal_pe::<T>(grid.h, d_pe)?;
    let pw = sinusoidal_pe::<T>(grid.w, d_pe)?;
    let mut data = Vec::with_capacity(grid.len() * 3 * d_pe);
    for n in 0..grid.len() {
        let (t, h, w) = grid.coords(n);
        data.extend_from_slice(&pt.data()[t * d_pe..(t + 1) * d_pe]);
        data.extend_from_slice(&pw.data()[w * d_pe..(w + 1) * d_pe]);
        data.extend_from_slice(&ph.data()[h * d_pe..(h + 1) * d_pe]);
    }
    Tensor::new(vec![grid.len(), 3 * d_pe], data)
}

/// Learnable projection `W_pos` of the concatenated per-axis encodings.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub d_pe: usize,
    pub dim: usize,
    pub w_pos: ParamId,
}

impl PositionalTable {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_pe: usize,
        dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if !d_pe.is_multiple_of(2) {
            return Err(invalid("positional table", format!("d_pe {d_pe} must be even")));
        }
        let std = (1.0 / (3 * d_pe) as f64).sqrt();
        let w_pos = store.add(format!("{prefix}.w_pos"), Tensor::randn(vec![3 * d_pe, dim], std, rng));
        Ok(Self { d_pe, dim, w_pos })
    }

    /// The `N × D` table `PE_3D` for `grid`.
    pub fn table<T: Real>(&self, store: &ParamStore<T>, grid: Grid) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.table_var(&mut tape, store, grid)?;
        Ok(tape.value(v).clone())
    }

    pub fn table_var<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, grid: Grid) -> Result<Var> {
        let feats = tape.constant(positional_features(grid, self.d_pe)?);
        let w = store.var(tape, self.w_pos);
        tape.matmul(feats, w)
    }

    /// `tokens + PE_3D` on a tape; `tokens` must be `N × D` for this grid.
    pub fn encode_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        grid: Grid,
    ) -> Result<Var> {
        if tape.shape(tokens) != [grid.len(), self.dim] {
            return Err(mismatch(
                "encode_positions",
                tape.shape(tokens),
                &[grid.len(), self.dim],
            ));
        }
        let pe = self.table_var(tape, store, grid)?;
        tape.add(tokens, pe)
    }
}

/// Adds the 3-D positional encoding to model-width tokens.
pub fn encode_positions<T: Real>(
    seq: &TokenSequence<T>,
    table: &PositionalTable,
    store: &ParamStore<T>,
) -> Result<TokenSequence<T>> {
    if seq.dim() != table.dim {
        return Err(mismatch(
            "encode_positions",
            seq.tokens.shape(),
            &[seq.len(), table.dim],
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let y = table.encode_var(&mut tape, store, x, seq.grid)?;
    Ok(TokenSequence {
        tokens: tape.value(y).clone(),
        width: TokenWidth::Model,
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_patch_gives_one_token_per_voxel() {
        let f = Tensor::<f64>::from_fn(vec![2, 3, 4, 5], |i| i as f64);
        let seq = unfold3d(&f, Patch::new(1, 1, 1)).unwrap();
        assert_eq!(seq.tokens.shape(), &[2 * 4 * 5, 3]);
        // token (t=1, h=2, w=3) holds the channel vector at that voxel
        let n = (4 + 2) * 5 + 3;
        for c in 0..3 {
            assert_eq!(seq.tokens.at(&[n, c]), f.at(&[1, c, 2, 3]));
        }
    }

    #[test]
    fn token_count_arithmetic() {
        let f = Tensor::<f32>::zeros(vec![5, 2, 8, 8]);
        let seq = unfold3d(&f, Patch::new(1, 4, 4)).unwrap();
        assert_eq!(seq.len(), 20);
        assert_eq!(seq.dim(), 2 * 16);
    }

    #[test]
    fn unfold_rejects_non_divisible() {
        let f = Tensor::<f32>::zeros(vec![5, 2, 6, 8]);
        assert!(unfold3d(&f, Patch::new(1, 4, 4)).is_err());
        assert!(unfold3d(&f, Patch::new(2, 2, 2)).is_err());
    }

    #[test]
    fn fold_inverts_unfold_with_temporal_patches() {
        let f = Tensor::<f64>::from_fn(vec![4, 3, 4, 6], |i| (i as f64).sin());
        let p = Patch::new(2, 2, 3);
        let seq = unfold3d(&f, p).unwrap();
        assert_eq!(fold3d(&seq.tokens, seq.grid, p).unwrap(), f);
    }

    #[test]
    fn sinusoidal_values() {
        let pe = sinusoidal_pe::<f64>(4, 8).unwrap();
        assert_eq!(&pe.data()[..8], &[0., 1., 0., 1., 0., 1., 0., 1.]);
        assert!((pe.at(&[1, 0]) - 0.8414709848).abs() < 1e-10);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe::<f64>(4, 7).is_err());
    }

    #[test]
    fn zero_projection_leaves_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = PositionalTable::new(&mut store, "pe", 4, 6, &mut rng).unwrap();
        *store.get_mut(table.w_pos) = Tensor::zeros(vec![12, 6]);
        let f = Tensor::<f64>::randn(vec![2, 6, 2, 2], 1.0, &mut rng);
        let seq = unfold3d(&f, Patch::new(1, 1, 1)).unwrap();
        let out = encode_positions(&seq, &table, &store).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = PositionalTable::new(&mut store, "pe", 4, 5, &mut rng).unwrap();
        let f = Tensor::<f64>::zeros(vec![1, 6, 2, 2]);
        let seq = unfold3d(&f, Patch::new(1, 1, 1)).unwrap();
        assert!(encode_positions(&seq, &table, &store).is_err());
    }

    #[test]
    fn shared_positions_get_identical_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = PositionalTable::new(&mut store, "pe", 8, 16, &mut rng).unwrap();
        let a = table.table(&store, Grid { t: 5, h: 2, w: 2 }).unwrap();
        let b = table.table(&store, Grid { t: 5, h: 2, w: 2 }).unwrap();
        assert_eq!(a, b);
        // the first rows of a longer grid share (t, h, w) with the shorter one
        let c = table.table(&store, Grid { t: 6, h: 2, w: 2 }).unwrap();
        assert_eq!(&c.data()[..a.numel()], a.data());
    }

    #[test]
    fn tape_unfold_matches_pure() {
        let f = Tensor::<f64>::from_fn(vec![5, 2, 8, 4], |i| i as f64 * 0.5);
        let mut tape = Tape::new();
        let v = tape.constant(f.clone());
        let (tok, grid) = unfold3d_var(&mut tape, v, Patch::default()).unwrap();
        let seq = unfold3d(&f, Patch::default()).unwrap();
        assert_eq!(tape.value(tok), &seq.tokens);
        let back = fold3d_var(&mut tape, tok, grid, Patch::default()).unwrap();
        assert_eq!(tape.value(back), &f);
    }
}

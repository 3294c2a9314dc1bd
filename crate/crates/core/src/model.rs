//! The full super-resolution network: shallow conv features, a stack of
//! linear-attention transformer layers paired with CNN stages and fusion
//! modules, and a pixel-shuffle reconstruction of the centre frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affm::FusionStage;
use crate::attention::{TransformerBlock, LEAKY_SLOPE};
use crate::cnn::CnnBranch;
use crate::config::ModelConfig;
use crate::error::{mismatch, Result};
use crate::optim::ParamStore;
use crate::patch::{fold3d_var, unfold3d_var, Grid, PositionalTable};
use crate::pose::PoseHead;
use crate::scalar::Real;
use crate::synth::{bicubic_resize, Resize};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct StarNet {
    pub config: ModelConfig,
    /// 3×3 conv `3 → C` producing `F_0`.
    pub stem: (ParamId, ParamId),
    /// Token projection `C·|patch| → D`.
    pub embed: (ParamId, ParamId),
    pub positions: PositionalTable,
    pub blocks: Vec<TransformerBlock>,
    pub cnn: CnnBranch,
    pub fusion: Vec<FusionStage>,
    /// 1×1 conv from folded token channels to `C`.
    pub tail_adapt: (ParamId, ParamId),
    /// 3×3 conv `C → 3·scale²` ahead of the pixel shuffle.
    pub upsample: (ParamId, ParamId),
    /// Learnable gain on the bicubic-upsampled centre frame, starts at 1 so the
    /// network begins as a global residual.
    pub skip_gain: ParamId,
}

impl StarNet {
    /// Builds every parameter in a fixed order from `config.seed`. CNN and
    /// fusion parameters exist even when the branch is switched off, so
    /// ablated variants share the rest of their initialization.
    pub fn new<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let d = config.dim;
        let pv = config.patch.volume();
        let conv = |store: &mut ParamStore<T>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    cout: usize,
                    cin: usize,
                    k: usize,
                    gain: f64| {
            let std = gain / ((cin * k * k) as f64).sqrt();
            (
                store.add(format!("{name}.w"), Tensor::randn(vec![cout, cin, k, k], std, rng)),
                store.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
            )
        };
        let stem = conv(store, &mut rng, "stem", c, 3, 3, 1.0);
        let embed = (
            store.add(
                "embed.w",
                Tensor::randn(vec![c * pv, d], 1.0 / ((c * pv) as f64).sqrt(), &mut rng),
            ),
            store.add("embed.b", Tensor::zeros(vec![d])),
        );
        let positions = PositionalTable::new(store, "pos", config.d_pe, d, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("block{i}"), d, config.heads, config.phi, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cnn = CnnBranch::new(store, "cnn", c, config.fused_stages, config.mbconv_stages, &mut rng);
        let fusion = (0..config.layers)
            .map(|i| FusionStage::new(store, &format!("fusion{i}"), d, c, config.patch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tail_adapt = conv(store, &mut rng, "tail_adapt", c, d / pv, 1, 1.0);
        let r2 = config.scale * config.scale;
        let upsample = conv(store, &mut rng, "upsample", 3 * r2, c, 3, 0.1);
        let skip_gain = store.add("skip_gain", Tensor::scalar(T::one()));
        Ok(Self {
            config: config.clone(),
            stem,
            embed,
            positions,
            blocks,
            cnn,
            fusion,
            tail_adapt,
            upsample,
            skip_gain,
        })
    }

    fn conv<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        p: (ParamId, ParamId),
        pad: usize,
    ) -> Result<Var> {
        let (w, b) = (store.var(tape, p.0), store.var(tape, p.1));
        tape.conv2d(x, w, Some(b), 1, pad, 1)
    }

    /// Checks an LR clip shape `T × 3 × h × w` against the configuration.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 4
            && shape[0] == c.frames
            && shape[1] == 3
            && shape[2].is_multiple_of(c.patch.h)
            && shape[3].is_multiple_of(c.patch.w)
            && shape[2] > 0
            && shape[3] > 0;
        if ok {
            Ok(())
        } else {
            Err(mismatch(
                "star_forward input",
                shape,
                &[c.frames, 3, c.patch.h, c.patch.w],
            ))
        }
    }

    /// SR centre frame `1 × 3 × scale·h × scale·w` for an LR clip var.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, lr: Var) -> Result<Var> {
        let shape = tape.shape(lr).to_vec();
        self.check_input(&shape)?;
        let cfg = &self.config;
        let (n_frames, h, w) = (shape[0], shape[2], shape[3]);
        let center = n_frames / 2;

        let clip = if cfg.temporal_context {
            lr
        } else {
            let mid = tape.narrow(lr, 0, center, 1)?;
            tape.expand(mid, shape.clone())?
        };

        let f0 = Self::conv(tape, store, clip, self.stem, 1)?;
        let (patches, grid) = unfold3d_var(tape, f0, cfg.patch)?;
        let (ew, eb) = (store.var(tape, self.embed.0), store.var(tape, self.embed.1));
        let tokens = tape.linear(patches, ew, Some(eb))?;
        let mut x = self.positions.encode_var(tape, store, tokens, grid)?;

        let mut maps = f0;
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(tape, store, x, grid)?;
            x = if cfg.cnn_branch {
                maps = self.cnn.stages[i].forward(tape, store, maps)?;
                let fused = self.fusion[i].fuse_var(tape, store, out, maps, grid)?;
                self.fusion[i].inject_var(tape, store, out, fused)?
            } else {
                out
            };
        }

        let folded = fold3d_var(tape, x, grid, cfg.patch)?;
        let mid = tape.narrow(folded, 0, center, 1)?;
        let feat = Self::conv(tape, store, mid, self.tail_adapt, 0)?;
        let f0_mid = tape.narrow(f0, 0, center, 1)?;
        let feat = tape.add(feat, f0_mid)?;
        let feat = tape.leaky(feat, T::of(LEAKY_SLOPE))?;
        let up = Self::conv(tape, store, feat, self.upsample, 1)?;
        let sr = tape.pixel_shuffle(up, cfg.scale)?;

        let lr_mid = tape.value(clip).index0(center)?;
        let base = bicubic_resize(&lr_mid, Resize::Up(cfg.scale))?;
        let base = base.reshape(vec![1, 3, h * cfg.scale, w * cfg.scale])?;
        let base = tape.constant(base);
        let gain = store.var(tape, self.skip_gain);
        let skip = tape.mul(gain, base)?;
        tape.add(sr, skip)
    }

    pub fn grid_for(&self, h: usize, w: usize) -> Grid {
        Grid {
            t: self.config.frames / self.config.patch.t,
            h: h / self.config.patch.h,
            w: w / self.config.patch.w,
        }
    }
}

/// SR centre frame and its predicted heatmaps for an LR clip.
pub fn star_forward<T: Real>(
    lr_clip: &Tensor<T>,
    net: &StarNet,
    store: &ParamStore<T>,
    head: &PoseHead,
    head_store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(lr_clip.clone());
    let sr = net.forward(&mut tape, store, x)?;
    let hm = head.forward(&mut tape, head_store, sr)?;
    Ok((tape.value(sr).clone(), tape.value(hm).clone()))
}

/// SR centre frame only.
pub fn super_resolve<T: Real>(lr_clip: &Tensor<T>, net: &StarNet, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(lr_clip.clone());
    let sr = net.forward(&mut tape, store, x)?;
    Ok(tape.value(sr).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 3,
            dim: 48,
            channels: 4,
            fused_stages: 1,
            mbconv_stages: 1,
            d_pe: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_is_scale_times_input() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let net = StarNet::new(&cfg, &mut store).unwrap();
        let lr = Tensor::from_fn(vec![5, 3, 8, 12], |i| (i % 7) as f64 / 7.0);
        let sr = super_resolve(&lr, &net, &store).unwrap();
        assert_eq!(sr.shape(), &[1, 3, 32, 48]);
        assert!(super_resolve(&Tensor::<f64>::zeros(vec![5, 3, 6, 12]), &net, &store).is_err());
        assert!(super_resolve(&Tensor::<f64>::zeros(vec![4, 3, 8, 12]), &net, &store).is_err());
    }

    #[test]
    fn fresh_fusion_matches_transformer_only_path() {
        let cfg = tiny();
        let mut s1 = ParamStore::<f64>::new();
        let n1 = StarNet::new(&cfg, &mut s1).unwrap();
        let off = ModelConfig {
            cnn_branch: false,
            ..cfg
        };
        let mut s2 = ParamStore::<f64>::new();
        let n2 = StarNet::new(&off, &mut s2).unwrap();
        assert_eq!(s1, s2);
        let lr = Tensor::from_fn(vec![5, 3, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
        assert_eq!(
            super_resolve(&lr, &n1, &s1).unwrap(),
            super_resolve(&lr, &n2, &s2).unwrap()
        );
    }
}

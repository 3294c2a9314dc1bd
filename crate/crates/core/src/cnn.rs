//! Per-frame convolutional branch: Fused-MBConv stages followed by MBConv
//! stages with squeeze-excitation. Every stage keeps `C×H×W` and adds a
//! residual connection.

use rand::Rng;

use crate::attention::LEAKY_SLOPE;
use crate::error::{mismatch, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const EXPANSION: usize = 4;
pub const SE_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    FusedMBConv,
    MBConv,
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: String,
        cout: usize,
        cin_per_group: usize,
        k: usize,
        std_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin_per_group * k * k) as f64;
        let w = Tensor::randn(vec![cout, cin_per_group, k, k], std_scale / fan_in.sqrt(), rng);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
        }
    }

    fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let w = store.var(tape, self.w);
        let b = store.var(tape, self.b);
        tape.conv2d(x, w, Some(b), 1, pad, groups)
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub kind: StageKind,
    pub channels: usize,
    expand: ConvParams,
    depthwise: Option<ConvParams>,
    se: Option<(ConvParams, ConvParams)>,
    project: ConvParams,
}

impl ConvStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: StageKind,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        let e = EXPANSION * c;
        let proj_scale = 0.5;
        match kind {
            StageKind::FusedMBConv => Self {
                kind,
                channels,
                expand: ConvParams::new(store, format!("{prefix}.expand"), e, c, 3, 1.0, rng),
                depthwise: None,
                se: None,
                project: ConvParams::new(store, format!("{prefix}.project"), c, e, 1, proj_scale, rng),
            },
            StageKind::MBConv => {
                let squeeze = (e / SE_REDUCTION).max(1);
                Self {
                    kind,
                    channels,
                    expand: ConvParams::new(store, format!("{prefix}.expand"), e, c, 1, 1.0, rng),
                    depthwise: Some(ConvParams::new(store, format!("{prefix}.dw"), e, 1, 3, 1.0, rng)),
                    se: Some((
                        ConvParams::new(store, format!("{prefix}.se_reduce"), squeeze, e, 1, 1.0, rng),
                        ConvParams::new(store, format!("{prefix}.se_expand"), e, squeeze, 1, 1.0, rng),
                    )),
                    project: ConvParams::new(store, format!("{prefix}.project"), c, e, 1, proj_scale, rng),
                }
            }
        }
    }

    /// Final projection weights and bias; zeroing them makes the stage the identity.
    pub fn projection(&self) -> [ParamId; 2] {
        [self.project.w, self.project.b]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(mismatch(
                "conv stage",
                &s,
                &[s.first().copied().unwrap_or(0), self.channels, 0, 0],
            ));
        }
        let slope = T::of(LEAKY_SLOPE);
        let h = match self.kind {
            StageKind::FusedMBConv => {
                let h = self.expand.apply(tape, store, x, 1, 1)?;
                tape.leaky(h, slope)?
            }
            StageKind::MBConv => {
                let e = EXPANSION * self.channels;
                let h = self.expand.apply(tape, store, x, 0, 1)?;
                let h = tape.leaky(h, slope)?;
                let dw = self.depthwise.as_ref().expect("mbconv has depthwise");
                let h = dw.apply(tape, store, h, 1, e)?;
                let (reduce, expand) = self.se.as_ref().expect("mbconv has squeeze-excitation");
                let gate = se_gate(tape, store, h, reduce, expand)?;
                tape.mul(h, gate)?
            }
        };
        let y = self.project.apply(tape, store, h, 0, 1)?;
        tape.add(x, y)
    }
}

/// `sigmoid(expand(leaky(reduce(GAP(h)))))`, broadcast back over space. GAP is per frame.
fn se_gate<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    reduce: &ConvParams,
    expand: &ConvParams,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let g = tape.mean(h, &[2, 3])?;
    let g = tape.reshape(g, vec![s[0], s[1], 1, 1])?;
    let g = reduce.apply(tape, store, g, 0, 1)?;
    let g = tape.leaky(g, T::of(LEAKY_SLOPE))?;
    let g = expand.apply(tape, store, g, 0, 1)?;
    let g = tape.sigmoid(g)?;
    tape.expand(g, s)
}

/// Squeeze-excitation gate values (`T × 4C`) of an MBConv stage for input `x`.
pub fn se_gate_values<T: Real>(stage: &ConvStage, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let slope = T::of(LEAKY_SLOPE);
    let e = EXPANSION * stage.channels;
    let h = stage.expand.apply(&mut tape, store, xv, 0, 1)?;
    let h = tape.leaky(h, slope)?;
    let dw = stage
        .depthwise
        .as_ref()
        .ok_or_else(|| crate::error::invalid("se_gate_values", "stage has no squeeze-excitation"))?;
    let h = dw.apply(&mut tape, store, h, 1, e)?;
    let (reduce, expand) = stage.se.as_ref().expect("mbconv has squeeze-excitation");
    let g = se_gate(&mut tape, store, h, reduce, expand)?;
    Ok(tape.value(g).clone())
}

pub fn fused_mbconv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, stage: &ConvStage) -> Result<Var> {
    if stage.kind != StageKind::FusedMBConv {
        return Err(crate::error::invalid("fused_mbconv", "stage is not Fused-MBConv"));
    }
    stage.forward(tape, store, x)
}

pub fn mbconv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, stage: &ConvStage) -> Result<Var> {
    if stage.kind != StageKind::MBConv {
        return Err(crate::error::invalid("mbconv", "stage is not MBConv"));
    }
    stage.forward(tape, store, x)
}

/// The whole branch: `fused` Fused-MBConv stages, then `mb` MBConv stages.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub stages: Vec<ConvStage>,
}

impl CnnBranch {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        fused: usize,
        mb: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let stages = (0..fused + mb)
            .map(|i| {
                let kind = if i < fused {
                    StageKind::FusedMBConv
                } else {
                    StageKind::MBConv
                };
                ConvStage::new(store, &format!("{prefix}.stage{i}"), kind, channels, rng)
            })
            .collect();
        Self { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Output of every stage, in order. Frames are the batch axis.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f0: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut x = f0;
        for s in &self.stages {
            x = s.forward(tape, store, x)?;
            outs.push(x);
        }
        Ok(outs)
    }
}

pub fn cnn_forward<T: Real>(branch: &CnnBranch, store: &ParamStore<T>, f0: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let x = tape.constant(f0.clone());
    let outs = branch.forward(&mut tape, store, x)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(s);
        }
    }

    #[test]
    fn zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let branch = CnnBranch::new(&mut store, "cnn", 4, 1, 1, &mut rng);
        for s in &branch.stages {
            zero(&mut store, &s.projection());
        }
        let x = Tensor::randn(vec![2, 4, 5, 6], 1.0, &mut rng);
        let outs = cnn_forward(&branch, &store, &x).unwrap();
        assert_eq!(outs.len(), 2);
        for o in outs {
            assert_eq!(o, x);
        }
    }

    #[test]
    fn stages_preserve_shape_and_reject_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let branch = CnnBranch::new(&mut store, "cnn", 4, 3, 5, &mut rng);
        let x = Tensor::randn(vec![3, 4, 4, 4], 1.0, &mut rng);
        let outs = cnn_forward(&branch, &store, &x).unwrap();
        assert_eq!(outs.len(), 8);
        assert!(outs.iter().all(|o| o.shape() == x.shape()));
        let bad = Tensor::zeros(vec![3, 5, 4, 4]);
        assert!(cnn_forward(&branch, &store, &bad).is_err());
    }

    #[test]
    fn se_gate_is_spatially_constant_for_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let stage = ConvStage::new(&mut store, "mb", StageKind::MBConv, 4, &mut rng);
        // constant input; depthwise bias and weights make borders differ, so
        // check the gate, which is built from the per-frame GAP
        let x = Tensor::full(vec![1, 4, 6, 6], 0.7);
        let g = se_gate_values(&stage, &store, &x).unwrap();
        let plane = 36;
        for c in 0..16 {
            let p = &g.data()[c * plane..(c + 1) * plane];
            assert!(p.iter().all(|&v| v == p[0]));
            assert!(p[0] > 0.0 && p[0] < 1.0);
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let stage = ConvStage::new(&mut store, "f", StageKind::FusedMBConv, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(mbconv(&mut tape, &store, x, &stage).is_err());
        assert!(fused_mbconv(&mut tape, &store, x, &stage).is_ok());
    }
}

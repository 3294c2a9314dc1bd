//! Gaussian heatmap targets, the small frozen pose head and the compound
//! pixel + pose loss.

use rand::Rng;

use crate::attention::LEAKY_SLOPE;
use crate::error::{invalid, mismatch, Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const NUM_KEYPOINTS: usize = 15;
pub const HEATMAP_SIGMA: f64 = 2.0;
pub const HEATMAP_STRIDE: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet<T> {
    /// `K × H_m × W_m`.
    pub maps: Tensor<T>,
    pub sigma: f64,
    pub stride: usize,
    /// Keypoints that fell outside the frame and were clamped to the border.
    pub clamped: usize,
}

/// Heatmap extent for a frame extent: two stride-2 convolutions with padding 1.
pub fn heatmap_extent(frame: usize, stride: usize) -> usize {
    frame.div_ceil(stride)
}

/// One unnormalized Gaussian per keypoint `(x, y)` (pixels), centred on the
/// nearest heatmap cell so that the peak is exactly 1.
pub fn make_heatmaps<T: Real>(
    keypoints: &[(f64, f64)],
    frame: (usize, usize),
    sigma: f64,
    stride: usize,
) -> Result<HeatmapSet<T>> {
    if sigma <= 0.0 || stride == 0 {
        return Err(invalid("make_heatmaps", format!("sigma {sigma}, stride {stride}")));
    }
    let (fh, fw) = frame;
    let (hm, wm) = (heatmap_extent(fh, stride), heatmap_extent(fw, stride));
    let mut data = vec![T::zero(); keypoints.len() * hm * wm];
    let mut clamped = 0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (k, &(x, y)) in keypoints.iter().enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            return Err(invalid("make_heatmaps", format!("keypoint {k} is not finite")));
        }
        if x < 0.0 || y < 0.0 || x > (fw - 1) as f64 || y > (fh - 1) as f64 {
            clamped += 1;
        }
        let cx = (x / stride as f64).round().clamp(0.0, (wm - 1) as f64);
        let cy = (y / stride as f64).round().clamp(0.0, (hm - 1) as f64);
        let plane = &mut data[k * hm * wm..(k + 1) * hm * wm];
        for i in 0..hm {
            let dy = i as f64 - cy;
            for j in 0..wm {
                let dx = j as f64 - cx;
                plane[i * wm + j] = T::of((-(dx * dx + dy * dy) * inv).exp());
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} keypoint(s) outside the frame were clamped to the border");
    }
    Ok(HeatmapSet {
        maps: Tensor::new(vec![keypoints.len(), hm, wm], data)?,
        sigma,
        stride,
        clamped,
    })
}

/// Argmax cell of every `H_m × W_m` plane, scaled by `stride`, as `(x, y)`.
/// Accepts `K×H×W` or `B×K×H×W` (flattened batch-major). Ties go to the first
/// row-major cell.
pub fn decode_keypoints<T: Real>(maps: &Tensor<T>, stride: usize) -> Result<Vec<(f64, f64)>> {
    let s = maps.shape();
    if s.len() < 2 {
        return Err(invalid("decode_keypoints", format!("shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h * w == 0 {
        return Err(invalid("decode_keypoints", "empty map"));
    }
    Ok(maps
        .data()
        .chunks(h * w)
        .map(|plane| {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            (((best % w) * stride) as f64, ((best / w) * stride) as f64)
        })
        .collect())
}

/// Three 3×3 conv stages (stride 2, 2, 1) with leaky activations, then a 1×1
/// projection to one map per keypoint. Output is at 1/4 input resolution.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub widths: [usize; 3],
    pub keypoints: usize,
    convs: [(ParamId, ParamId); 4],
}

impl PoseHead {
    pub const STRIDES: [usize; 3] = [2, 2, 1];

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: [usize; 3],
        keypoints: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let chans = [3, widths[0], widths[1], widths[2]];
        let mut add = |name: String, cout: usize, cin: usize, k: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            (
                store.add(format!("{name}.w"), Tensor::randn(vec![cout, cin, k, k], std, rng)),
                store.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
            )
        };
        let c0 = add(format!("{prefix}.conv0"), chans[1], chans[0], 3);
        let c1 = add(format!("{prefix}.conv1"), chans[2], chans[1], 3);
        let c2 = add(format!("{prefix}.conv2"), chans[3], chans[2], 3);
        let out = add(format!("{prefix}.out"), keypoints, chans[3], 1);
        Self {
            widths,
            keypoints,
            convs: [c0, c1, c2, out],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn freeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.param_ids() {
            store.freeze(id);
        }
    }

    /// `B×3×H×W -> B×K×⌈H/4⌉×⌈W/4⌉`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(mismatch("pose head", s, &[0, 3, 0, 0]));
        }
        let mut x = image;
        for (i, &(w, b)) in self.convs[..3].iter().enumerate() {
            let (wv, bv) = (store.var(tape, w), store.var(tape, b));
            x = tape.conv2d(x, wv, Some(bv), Self::STRIDES[i], 1, 1)?;
            x = tape.leaky(x, T::of(LEAKY_SLOPE))?;
        }
        let (w, b) = self.convs[3];
        let (wv, bv) = (store.var(tape, w), store.var(tape, b));
        tape.conv2d(x, wv, Some(bv), 1, 0, 1)
    }
}

/// Predicted heatmaps for `B×3×H×W` (or a single `3×H×W`) images.
pub fn pose_forward<T: Real>(image: &Tensor<T>, head: &PoseHead, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let squeeze = image.ndim() == 3;
    let img = if squeeze {
        let mut s = vec![1];
        s.extend_from_slice(image.shape());
        image.reshape(s)?
    } else {
        image.clone()
    };
    let mut tape = Tape::new();
    let x = tape.constant(img);
    let y = head.forward(&mut tape, store, x)?;
    let out = tape.value(y).clone();
    if squeeze {
        out.reshape(out.shape()[1..].to_vec())
    } else {
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub pixel: Var,
    pub pose: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub pixel: f64,
    pub pose: f64,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "pose loss weight must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// `mean|sr − hr| + λ · mean((pred − target)²)`.
pub fn compound_loss_var<T: Real>(
    tape: &mut Tape<T>,
    sr: Var,
    hr: Var,
    pred: Var,
    target: Var,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    if tape.shape(sr) != tape.shape(hr) {
        return Err(mismatch("compound loss (images)", tape.shape(sr), tape.shape(hr)));
    }
    if tape.shape(pred) != tape.shape(target) {
        return Err(mismatch(
            "compound loss (heatmaps)",
            tape.shape(pred),
            tape.shape(target),
        ));
    }
    let d = tape.sub(sr, hr)?;
    let d = tape.abs(d)?;
    let pixel = tape.mean_all(d)?;
    let e = tape.sub(pred, target)?;
    let e2 = tape.mul(e, e)?;
    let pose = tape.mean_all(e2)?;
    let weighted = tape.scale(pose, T::of(lambda))?;
    let total = tape.add(pixel, weighted)?;
    Ok(LossVars { total, pixel, pose })
}

pub fn compound_loss<T: Real>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let vars = [sr, hr, pred, target].map(|t| tape.constant(t.clone()));
    let l = compound_loss_var(&mut tape, vars[0], vars[1], vars[2], vars[3], lambda)?;
    Ok(LossValues {
        total: tape.value(l.total).item().as_f64(),
        pixel: tape.value(l.pixel).item().as_f64(),
        pose: tape.value(l.pose).item().as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heatmap_peak_and_half_max() {
        let set = make_heatmaps::<f64>(&[(40.0, 20.0)], (64, 64), 2.0, 4).unwrap();
        assert_eq!(set.maps.shape(), &[1, 16, 16]);
        assert_eq!(set.maps.at(&[0, 5, 10]), 1.0);
        assert!(set.maps.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // off-grid half-maximum check against the continuous closed form
        let r = 2.0 * (2.0f64 * 2.0f64.ln()).sqrt();
        let v = (-(r * r) / (2.0 * 4.0f64)).exp();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(set.clamped, 0);
    }

    #[test]
    fn out_of_frame_is_clamped_and_counted() {
        let set = make_heatmaps::<f64>(&[(-5.0, 8.0), (500.0, 500.0)], (32, 32), 2.0, 4).unwrap();
        assert_eq!(set.clamped, 2);
        let kp = decode_keypoints(&set.maps, 4).unwrap();
        assert_eq!(kp, vec![(0.0, 8.0), (28.0, 28.0)]);
    }

    #[test]
    fn decode_round_trip_within_half_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kps: Vec<(f64, f64)> = (0..15)
            .map(|_| (rng.gen_range(0.0..191.0), rng.gen_range(0.0..255.0)))
            .collect();
        let set = make_heatmaps::<f32>(&kps, (256, 192), 2.0, 4).unwrap();
        assert_eq!(set.maps.shape(), &[15, 64, 48]);
        let dec = decode_keypoints(&set.maps, 4).unwrap();
        for (a, b) in kps.iter().zip(&dec) {
            assert!((a.0 - b.0).abs() <= 2.0 && (a.1 - b.1).abs() <= 2.0, "{a:?} {b:?}");
        }
        let flat = Tensor::<f64>::full(vec![1, 4, 4], 0.3);
        assert_eq!(decode_keypoints(&flat, 4).unwrap(), vec![(0.0, 0.0)]);
    }

    #[test]
    fn head_output_shape_and_freeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let head = PoseHead::new(&mut store, "pose", [4, 6, 6], 15, &mut rng);
        let img = Tensor::uniform(vec![1, 3, 32, 24], 0.0, 1.0, &mut rng);
        let hm = pose_forward(&img, &head, &store).unwrap();
        assert_eq!(hm.shape(), &[1, 15, 8, 6]);

        head.freeze(&mut store);
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone().with_grad());
        let y = head.forward(&mut tape, &store, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param_ids().is_empty());
        assert!(g.wrt(x).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hr = Tensor::<f64>::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng);
        let h = Tensor::<f64>::uniform(vec![15, 2, 2], 0.0, 1.0, &mut rng);
        let p = Tensor::<f64>::uniform(vec![15, 2, 2], 0.0, 1.0, &mut rng);
        assert_eq!(compound_loss(&hr, &hr, &h, &h, 10.0).unwrap().total, 0.0);
        let sr = hr.map(|v| v + 0.5);
        assert!((compound_loss(&sr, &hr, &h, &h, 10.0).unwrap().total - 0.5).abs() < 1e-15);
        let l0 = compound_loss(&sr, &hr, &p, &h, 0.0).unwrap();
        assert_eq!(l0.total, l0.pixel);
        assert!(compound_loss(&sr, &hr, &p, &h, -1.0).is_err());
        let l10 = compound_loss(&sr, &hr, &p, &h, DEFAULT_LAMBDA).unwrap();
        assert!(l10.total >= l0.total);
    }
}

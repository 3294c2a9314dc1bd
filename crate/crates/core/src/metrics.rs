//! Image quality and keypoint accuracy metrics. All computed in f64.

use crate::error::{invalid, mismatch, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PCK_TAU: f64 = 0.2;

/// `10·log10(peak² / MSE)`, capped at 99 dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(mismatch("psnr", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(invalid("psnr", "empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Luma planes: `H×W` as is, `C×H×W` channel-averaged, `B×C×H×W` one per batch item.
fn luma_planes<T: Real>(x: &Tensor<T>) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let s = x.shape();
    let (b, c, h, w) = match *s {
        [h, w] => (1, 1, h, w),
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(invalid("ssim", format!("unsupported shape {s:?}"))),
    };
    let planes = (0..b)
        .map(|bi| {
            (0..h * w)
                .map(|p| {
                    (0..c)
                        .map(|ci| x.data()[(bi * c + ci) * h * w + p].as_f64())
                        .sum::<f64>()
                        / c as f64
                })
                .collect()
        })
        .collect();
    Ok((planes, h, w))
}

/// Mean local SSIM over valid 11×11 Gaussian (σ = 1.5) windows of the luma
/// plane, peak 1. Batched inputs average over the batch.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(mismatch("ssim", a.shape(), b.shape()));
    }
    let (pa, h, w) = luma_planes(a)?;
    let (pb, _, _) = luma_planes(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(
            "ssim",
            format!("image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let exx = filter_valid(&xx, h, w, &k);
        let eyy = filter_valid(&yy, h, w, &k);
        let exy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / pa.len() as f64)
}

/// Fraction of keypoints within `tau · figure_height` of the truth (inclusive).
pub fn pck(pred: &[(f64, f64)], truth: &[(f64, f64)], figure_height: f64, tau: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(
            "pck",
            format!("{} predictions for {} keypoints", pred.len(), truth.len()),
        ));
    }
    if figure_height <= 0.0 || !figure_height.is_finite() {
        return Err(invalid("pck", format!("figure height {figure_height}")));
    }
    if truth.is_empty() {
        return Err(invalid("pck", "no keypoints"));
    }
    let thr = tau * figure_height;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (p.0 - t.0).hypot(p.1 - t.1) <= thr)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let b = a.map(|v| v + 1.0 / 16.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * 256f64.log10()).abs() < 1e-9);
        assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2] {
            let n = Tensor::from_fn(a.shape().to_vec(), |i| {
                a.data()[i] + amp * ((i * 7919 % 13) as f64 / 6.0 - 1.0)
            });
            let v = psnr(&a, &n, 1.0).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(psnr(&a, &Tensor::zeros(vec![3, 16, 15]), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform(vec![3, 24, 20], 0.0, 0.8, &mut rng);
        let b = Tensor::<f64>::uniform(vec![3, 24, 20], 0.0, 0.8, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        let s2 = ssim(&a.map(|v| v + 0.1), &b.map(|v| v + 0.1)).unwrap();
        assert!((s - s2).abs() < 1e-3, "{s} {s2}");
        assert!(ssim(&Tensor::<f64>::zeros(vec![10, 30]), &Tensor::zeros(vec![10, 30])).is_err());
    }

    #[test]
    fn pck_boundaries() {
        let t = vec![(10.0, 10.0), (50.0, 20.0)];
        assert_eq!(pck(&t, &t, 100.0, 0.2).unwrap(), 1.0);
        let on: Vec<_> = t.iter().map(|p| (p.0 + 20.0, p.1)).collect();
        assert_eq!(pck(&on, &t, 100.0, 0.2).unwrap(), 1.0);
        let off: Vec<_> = t.iter().map(|p| (p.0, p.1 - 40.0)).collect();
        assert_eq!(pck(&off, &t, 100.0, 0.2).unwrap(), 0.0);
        assert!(pck(&t, &t, 0.0, 0.2).is_err());
    }
}

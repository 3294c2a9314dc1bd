//! Slice-level compute kernels. Inner loops run over contiguous rows so the
//! compiler can vectorize them; accumulation order is fixed, so results are
//! deterministic for identical inputs.

use crate::scalar::Real;

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `c[m×p] += a[m×k] · b[k×p]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, &b[kk * p..(kk + 1) * p], crow);
        }
    }
}

/// `c[m×k] += d[m×p] · b[k×p]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, p: usize, k: usize, d: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let drow = &d[i * p..(i + 1) * p];
        for kk in 0..k {
            c[i * k + kk] += dot(drow, &b[kk * p..(kk + 1) * p]);
        }
    }
}

/// `c[k×p] += a[m×k]ᵀ · d[m×p]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, p: usize, a: &[T], d: &[T], c: &mut [T]) {
    for i in 0..m {
        let drow = &d[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, drow, &mut c[kk * p..(kk + 1) * p]);
        }
    }
}

/// Geometry of a square-kernel 2-D convolution over `B×C×H×W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.out_h(), self.out_w()]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.groups, self.k, self.k]
    }

    /// Range of output indices whose tap `kt` lands inside an input extent `n`.
    #[inline]
    fn valid(&self, kt: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kt { (self.pad - kt).div_ceil(s) } else { 0 };
        let hi = if n + self.pad > kt {
            ((n - 1 + self.pad - kt) / s + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Number of multiply-adds in one forward pass.
    pub fn madds(&self) -> u64 {
        (self.batch * self.cout * self.out_h() * self.out_w() * (self.cin / self.groups) * self.k * self.k) as u64
    }

    /// Visits every (input plane, output plane, weight index, tap) tuple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for b in 0..self.batch {
            for g in 0..self.groups {
                for oc in 0..cout_g {
                    let o = g * cout_g + oc;
                    for ic in 0..cin_g {
                        let c = g * cin_g + ic;
                        let in_plane = b * self.cin + c;
                        let out_plane = b * self.cout + o;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let widx = ((o * cin_g + ic) * self.k + ky) * self.k + kx;
                                f(in_plane, out_plane, widx, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward; `out` must be zeroed or hold values to accumulate into.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd, s, pad) = (g.h, g.w, g.stride, g.pad);
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (o, &bo) in bias.iter().enumerate().take(g.cout) {
                let base = (b * g.cout + o) * oh * ow;
                out[base..base + oh * ow].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    g.for_each_tap(|ip, op, widx, ky, kx| {
        let wv = w[widx];
        let xin = &x[ip * h * wd..(ip + 1) * h * wd];
        let yout = &mut out[op * oh * ow..(op + 1) * oh * ow];
        let (y0, y1) = g.valid(ky, h, oh);
        let (x0, x1) = g.valid(kx, wd, ow);
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let orow = &mut yout[oy * ow + x0..oy * ow + x1];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                axpy(wv, &xin[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)], orow);
            } else {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += wv * xin[iy * wd + (x0 + j) * s + kx - pad];
                }
            }
        }
    });
}

/// Accumulates the input gradient.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, dout: &[T], w: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd, s, pad) = (g.h, g.w, g.stride, g.pad);
    g.for_each_tap(|ip, op, widx, ky, kx| {
        let wv = w[widx];
        let dplane = &dout[op * oh * ow..(op + 1) * oh * ow];
        let xplane = &mut dx[ip * h * wd..(ip + 1) * h * wd];
        let (y0, y1) = g.valid(ky, h, oh);
        let (x0, x1) = g.valid(kx, wd, ow);
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let drow = &dplane[oy * ow + x0..oy * ow + x1];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                axpy(wv, drow, &mut xplane[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)]);
            } else {
                for (j, &d) in drow.iter().enumerate() {
                    xplane[iy * wd + (x0 + j) * s + kx - pad] += wv * d;
                }
            }
        }
    });
}

/// Accumulates the weight gradient.
pub fn conv2d_backward_weight<T: Real>(g: &ConvGeom, dout: &[T], x: &[T], dw: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd, s, pad) = (g.h, g.w, g.stride, g.pad);
    g.for_each_tap(|ip, op, widx, ky, kx| {
        let dplane = &dout[op * oh * ow..(op + 1) * oh * ow];
        let xin = &x[ip * h * wd..(ip + 1) * h * wd];
        let (y0, y1) = g.valid(ky, h, oh);
        let (x0, x1) = g.valid(kx, wd, ow);
        let mut acc = T::zero();
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let drow = &dplane[oy * ow + x0..oy * ow + x1];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                acc += dot(drow, &xin[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)]);
            } else {
                for (j, &d) in drow.iter().enumerate() {
                    acc += d * xin[iy * wd + (x0 + j) * s + kx - pad];
                }
            }
        }
        dw[widx] += acc;
    });
}

/// Bias gradient: per-output-channel sum.
pub fn conv2d_backward_bias<T: Real>(g: &ConvGeom, dout: &[T], db: &mut [T]) {
    let plane = g.out_h() * g.out_w();
    for b in 0..g.batch {
        for (o, d) in db.iter_mut().enumerate().take(g.cout) {
            let base = (b * g.cout + o) * plane;
            *d += dout[base..base + plane].iter().copied().sum::<T>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bounds_check() {
        for &(k, s, pad, n) in &[(3, 1, 1, 5), (3, 2, 1, 8), (5, 1, 2, 4), (1, 1, 0, 3), (3, 2, 1, 7)] {
            let g = ConvGeom {
                batch: 1,
                cin: 1,
                h: n,
                w: n,
                cout: 1,
                k,
                stride: s,
                pad,
                groups: 1,
            };
            let nout = g.out_h();
            for kt in 0..k {
                let (lo, hi) = g.valid(kt, n, nout);
                for o in 0..nout {
                    let i = (o * s + kt) as isize - pad as isize;
                    let inside = i >= 0 && (i as usize) < n;
                    assert_eq!(inside, o >= lo && o < hi, "k={k} s={s} pad={pad} n={n} kt={kt} o={o}");
                }
            }
        }
    }
}

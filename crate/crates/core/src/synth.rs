//! Synthetic stick-figure clips with exact keypoints, the blur + bicubic
//! degradation pipeline and the on-disk dataset layout.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::pose::NUM_KEYPOINTS;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::tnsr;

/// Joint order: head, neck, right arm (shoulder, elbow, wrist), left arm,
/// pelvis, right leg (hip, knee, ankle), left leg.
pub const JOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
];

pub const LIMBS: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (10, 11),
    (8, 12),
    (12, 13),
    (13, 14),
];

/// Radius (HR pixels) of the opaque joint marker core.
pub const MARKER_RADIUS: f64 = 4.0;
const LIMB_HALF_WIDTH: f64 = 1.5;
const LIMB_COLOR: [f64; 3] = [0.92, 0.92, 0.92];
/// Margin between any keypoint and the frame border.
const MARGIN: f64 = MARKER_RADIUS + 2.0;
/// Worst-case extents of the skeleton in units of figure height, with every
/// limb at its longest.
const MAX_VERTICAL_SPAN: f64 = 1.08;
const MAX_HORIZONTAL_SPAN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Nominal head-to-ankle height range, pixels.
    pub figure_height: (f64, f64),
    /// Largest per-frame displacement of any keypoint, pixels.
    pub max_velocity: f64,
    /// `false` freezes the figure across the clip.
    pub motion: bool,
    pub rectangles: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            height: 256,
            width: 192,
            figure_height: (110.0, 160.0),
            max_velocity: 3.0,
            motion: true,
            rectangles: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "clip extents must be positive, got {}×{}×{}",
                self.frames, self.height, self.width
            )));
        }
        let (lo, hi) = self.figure_height;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("figure height range ({lo}, {hi}) is empty")));
        }
        let drift = self.max_velocity * (self.frames - 1) as f64;
        let need_h = hi * MAX_VERTICAL_SPAN + drift + 2.0 * MARGIN;
        let need_w = hi * MAX_HORIZONTAL_SPAN + drift + 2.0 * MARGIN;
        if need_h > self.height as f64 || need_w > self.width as f64 {
            return Err(Error::Config(format!(
                "figure up to {hi} px needs a {need_h:.0}×{need_w:.0} frame, have {}×{}",
                self.height, self.width
            )));
        }
        if self.max_velocity < 0.0 {
            return Err(Error::Config("max velocity must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<T> {
    /// `T × 3 × H × W`, values in `[0, 1]`.
    pub frames: Tensor<T>,
    /// Per frame, `K` keypoints `(x, y)` in pixels.
    pub keypoints: Vec<Vec<(f64, f64)>>,
    pub figure_height: f64,
    pub seed: u64,
}

impl<T: Real> VideoClip<T> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self) -> usize {
        self.len() / 2
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.frames.shape();
        (s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> Result<Tensor<T>> {
        self.frames.index0(t)
    }
}

/// Distinct fully saturated hue per joint.
pub fn joint_color(k: usize) -> [f64; 3] {
    let h = k as f64 / NUM_KEYPOINTS as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Lengths (fractions of figure height) and a motion model for each angle.
struct Skeleton {
    head: f64,
    torso: f64,
    shoulder: f64,
    upper_arm: f64,
    forearm: f64,
    hip: f64,
    thigh: f64,
    shin: f64,
    /// Base angle, amplitude, angular frequency, phase. Order: torso, head,
    /// r upper arm, r forearm, l upper arm, l forearm, r thigh, r shin, l thigh, l shin.
    angles: [(f64, f64, f64, f64); 10],
    drift: (f64, f64),
}

impl Skeleton {
    fn sample(rng: &mut impl Rng, motion: bool) -> Self {
        let mut len = |base: f64| base * rng.gen_range(0.87..1.13);
        let (head, torso, shoulder) = (len(0.13), len(0.30), len(0.10));
        let (upper_arm, forearm, hip) = (len(0.16), len(0.14), len(0.07));
        let (thigh, shin) = (len(0.25), len(0.24));
        let mut angle = |lo: f64, hi: f64, amp: f64| {
            let base = rng.gen_range(lo..hi);
            let a = if motion { rng.gen_range(0.0..amp) } else { 0.0 };
            (base, a, rng.gen_range(0.4..1.0), rng.gen_range(0.0..2.0 * PI))
        };
        let angles = [
            angle(-0.12, 0.12, 0.06),
            angle(-0.2, 0.2, 0.1),
            angle(0.15, 1.3, 0.35),
            angle(-0.5, 0.8, 0.4),
            angle(-1.3, -0.15, 0.35),
            angle(-0.8, 0.5, 0.4),
            angle(0.02, 0.35, 0.2),
            angle(-0.3, 0.3, 0.25),
            angle(-0.35, -0.02, 0.2),
            angle(-0.3, 0.3, 0.25),
        ];
        let drift = if motion {
            (rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5))
        } else {
            (0.0, 0.0)
        };
        Self {
            head,
            torso,
            shoulder,
            upper_arm,
            forearm,
            hip,
            thigh,
            shin,
            angles,
            drift,
        }
    }

    /// Keypoints at frame `t` for figure height `fh`, pelvis at the origin
    /// plus drift. `motion` scales every time-varying term.
    fn pose(&self, t: f64, fh: f64, motion: f64) -> [(f64, f64); NUM_KEYPOINTS] {
        let a = |i: usize| {
            let (b, amp, w, ph) = self.angles[i];
            b + motion * amp * (w * t + ph).sin()
        };
        // angles are measured from straight down, clockwise in image space
        let step = |p: (f64, f64), len: f64, th: f64| (p.0 + len * fh * th.sin(), p.1 + len * fh * th.cos());
        let pelvis = (motion * self.drift.0 * t, motion * self.drift.1 * t);
        let torso = a(0);
        let neck = step(pelvis, self.torso, PI + torso);
        let head = step(neck, self.head, PI + torso + a(1));
        let perp = (torso.cos(), -torso.sin());
        let side = |p: (f64, f64), len: f64, s: f64| (p.0 + s * len * fh * perp.0, p.1 + s * len * fh * perp.1);
        let r_sh = side(neck, self.shoulder, -1.0);
        let l_sh = side(neck, self.shoulder, 1.0);
        let r_el = step(r_sh, self.upper_arm, torso - a(2));
        let r_wr = step(r_el, self.forearm, torso - a(2) - a(3));
        let l_el = step(l_sh, self.upper_arm, torso - a(4));
        let l_wr = step(l_el, self.forearm, torso - a(4) - a(5));
        let r_hip = side(pelvis, self.hip, -1.0);
        let l_hip = side(pelvis, self.hip, 1.0);
        let r_kn = step(r_hip, self.thigh, torso - a(6));
        let r_an = step(r_kn, self.shin, torso - a(6) - a(7));
        let l_kn = step(l_hip, self.thigh, torso - a(8));
        let l_an = step(l_kn, self.shin, torso - a(8) - a(9));
        [
            head, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr, pelvis, r_hip, r_kn, r_an, l_hip, l_kn, l_an,
        ]
    }
}

fn max_step(track: &[[(f64, f64); NUM_KEYPOINTS]]) -> f64 {
    track
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1)))
        .fold(0.0, f64::max)
}

/// Smooth per-channel value noise: random lattice values, smoothstep-blended.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let g = |i: usize, j: usize| lattice[i * gw + j];
            let (a, b, c, d) = (g(iy, ix), g(iy, ix + 1), g(iy + 1, ix), g(iy + 1, ix + 1));
            let mut v = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bot = c[ch] + (d[ch] - c[ch]) * tx;
                v[ch] = top + (bot - top) * ty;
            }
            out.push(v);
        }
    }
    out
}

fn background(h: usize, w: usize, rects: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
    ];
    let coarse = value_noise(h, w, 32.0, rng);
    let fine = value_noise(h, w, 8.0, rng);
    let mut img: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let mut v = [0.0; 3];
            for c in 0..3 {
                v[c] = base[c] + 0.35 * (coarse[i][c] - 0.5) + 0.12 * (fine[i][c] - 0.5);
            }
            v
        })
        .collect();
    for _ in 0..rects {
        let (rh, rw) = (rng.gen_range(1..=(h / 3).max(1)), rng.gen_range(1..=(w / 3).max(1)));
        let (y0, x0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
        // desaturated, so joint markers stay the most saturated colours in frame
        let grey = rng.gen_range(0.15..0.85);
        let col: [f64; 3] = std::array::from_fn(|_| 0.6 * grey + 0.4 * rng.gen_range(0.0..1.0));
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for c in 0..3 {
                    img[y * w + x][c] = 0.35 * img[y * w + x][c] + 0.65 * col[c];
                }
            }
        }
    }
    for p in img.iter_mut() {
        for c in p.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
    }
    img
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn draw_figure(img: &mut [[f64; 3]], h: usize, w: usize, kps: &[(f64, f64); NUM_KEYPOINTS]) {
    let bounds = |lo: f64, hi: f64, n: usize| {
        let a = (lo.floor().max(0.0)) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(n - 1);
        a..=b
    };
    for &(i, j) in &LIMBS {
        let (a, b) = (kps[i], kps[j]);
        let r = LIMB_HALF_WIDTH + 1.0;
        for y in bounds(a.1.min(b.1) - r, a.1.max(b.1) + r, h) {
            for x in bounds(a.0.min(b.0) - r, a.0.max(b.0) + r, w) {
                let d = segment_distance((x as f64, y as f64), a, b);
                let alpha = (LIMB_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let px = &mut img[y * w + x];
                    for c in 0..3 {
                        px[c] = (1.0 - alpha) * px[c] + alpha * LIMB_COLOR[c];
                    }
                }
            }
        }
    }
    for (k, &(kx, ky)) in kps.iter().enumerate() {
        let col = joint_color(k);
        let r = MARKER_RADIUS + 1.0;
        for y in bounds(ky - r, ky + r, h) {
            for x in bounds(kx - r, kx + r, w) {
                let d = (x as f64 - kx).hypot(y as f64 - ky);
                let px = &mut img[y * w + x];
                if d <= MARKER_RADIUS {
                    // opaque core, brightest at the joint
                    let g = 1.0 - 0.35 * d / MARKER_RADIUS;
                    for c in 0..3 {
                        px[c] = g * col[c];
                    }
                } else if d < r {
                    let alpha = r - d;
                    for c in 0..3 {
                        px[c] = (1.0 - alpha) * px[c] + alpha * 0.65 * col[c];
                    }
                }
            }
        }
    }
}

/// Renders one clip. Deterministic in `(config, seed)`.
pub fn render_clip<T: Real>(config: &SynthConfig, seed: u64) -> Result<VideoClip<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n) = (config.height, config.width, config.frames);
    let fh = rng.gen_range(config.figure_height.0..=config.figure_height.1);
    let skel = Skeleton::sample(&mut rng, config.motion);

    let track_at =
        |m: f64| -> Vec<[(f64, f64); NUM_KEYPOINTS]> { (0..n).map(|t| skel.pose(t as f64, fh, m)).collect() };
    let mut motion = if config.motion { 1.0 } else { 0.0 };
    let mut track = track_at(motion);
    for _ in 0..64 {
        let s = max_step(&track);
        if s <= config.max_velocity {
            break;
        }
        motion *= 0.9 * config.max_velocity / s;
        track = track_at(motion);
    }
    if max_step(&track) > config.max_velocity {
        track = track_at(0.0);
    }

    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in track.iter().flatten() {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    let free_x = w as f64 - 1.0 - 2.0 * MARGIN - (x1 - x0);
    let free_y = h as f64 - 1.0 - 2.0 * MARGIN - (y1 - y0);
    if free_x < 0.0 || free_y < 0.0 {
        return Err(invalid("render_clip", format!("figure does not fit a {h}×{w} frame")));
    }
    let ox = MARGIN - x0 + rng.gen_range(0.0..=free_x);
    let oy = MARGIN - y0 + rng.gen_range(0.0..=free_y);

    let bg = background(h, w, config.rectangles, &mut rng);
    let plane = h * w;
    let mut data = vec![T::zero(); n * 3 * plane];
    let mut keypoints = Vec::with_capacity(n);
    for (t, pose) in track.iter().enumerate() {
        let kps: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|k| (pose[k].0 + ox, pose[k].1 + oy));
        let mut img = bg.clone();
        draw_figure(&mut img, h, w, &kps);
        for (i, px) in img.iter().enumerate() {
            for c in 0..3 {
                data[(t * 3 + c) * plane + i] = T::of(px[c]);
            }
        }
        keypoints.push(kps.to_vec());
    }
    Ok(VideoClip {
        frames: Tensor::new(vec![n, 3, h, w], data)?,
        keypoints,
        figure_height: fh,
        seed,
    })
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Vec<f64> {
    let c = (ksize / 2) as f64;
    let k: Vec<f64> = (0..ksize)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// `2·⌈3σ⌉ + 1`.
pub fn default_ksize(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

fn planes<T: Real>(frames: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = frames.shape();
    if s.len() < 2 {
        return Err(invalid(op, format!("need at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(invalid(op, "empty image"));
    }
    Ok((frames.numel() / (h * w), h, w))
}

/// Separable normalized Gaussian over the last two axes, reflect padding.
pub fn gaussian_blur<T: Real>(frames: &Tensor<T>, sigma: f64, ksize: usize) -> Result<Tensor<T>> {
    if ksize.is_multiple_of(2) || ksize < 3 {
        return Err(invalid(
            "gaussian_blur",
            format!("kernel size {ksize} must be odd and >= 3"),
        ));
    }
    if sigma <= 0.0 {
        return Err(invalid("gaussian_blur", format!("sigma {sigma} must be positive")));
    }
    let (np, h, w) = planes(frames, "gaussian_blur")?;
    let k = gaussian_kernel(sigma, ksize);
    let r = (ksize / 2) as isize;
    let src = frames.data();
    let mut out = vec![T::zero(); frames.numel()];
    let mut tmp = vec![0.0f64; h * w];
    for p in 0..np {
        let x = &src[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * x[i * w + reflect(j as isize + t as isize - r, w)].as_f64();
                }
                tmp[i * w + j] = acc;
            }
        }
        let o = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(i as isize + t as isize - r, h) * w + j];
                }
                o[i * w + j] = T::of(acc);
            }
        }
    }
    Tensor::new(frames.shape().to_vec(), out)
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: four source indices (edge-clamped) and weights.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let f = src - base;
            let mut idx = [0; 4];
            let mut wt = [0.0; 4];
            for t in 0..4 {
                let i = base as isize - 1 + t as isize;
                idx[t] = i.clamp(0, n_in as isize - 1) as usize;
                wt[t] = keys_cubic(f - (t as f64 - 1.0));
            }
            (idx, wt)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Down(usize),
    Up(usize),
}

/// Separable bicubic resize of the last two axes by an integer factor.
pub fn bicubic_resize<T: Real>(frames: &Tensor<T>, resize: Resize) -> Result<Tensor<T>> {
    let (np, h, w) = planes(frames, "bicubic_resize")?;
    let (oh, ow) = match resize {
        Resize::Down(0) | Resize::Up(0) => return Err(invalid("bicubic_resize", "factor must be positive")),
        Resize::Down(s) => {
            if h % s != 0 || w % s != 0 {
                return Err(invalid("bicubic_resize", format!("{h}×{w} not divisible by {s}")));
            }
            (h / s, w / s)
        }
        Resize::Up(s) => (h * s, w * s),
    };
    let (ty, tx) = (resize_taps(h, oh), resize_taps(w, ow));
    let src = frames.data();
    let mut out = vec![T::zero(); np * oh * ow];
    let mut tmp = vec![0.0f64; h * ow];
    for p in 0..np {
        let x = &src[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for (j, (idx, wt)) in tx.iter().enumerate() {
                tmp[i * ow + j] = (0..4).map(|t| wt[t] * x[i * w + idx[t]].as_f64()).sum();
            }
        }
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, (idx, wt)) in ty.iter().enumerate() {
            for j in 0..ow {
                o[i * ow + j] = T::of((0..4).map(|t| wt[t] * tmp[idx[t] * ow + j]).sum());
            }
        }
    }
    let mut shape = frames.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub blur_sigma: f64,
    pub blur_ksize: usize,
}

impl DegradationSpec {
    /// `σ = scale / 2`, `ksize = 2·⌈3σ⌉ + 1`.
    pub fn for_scale(scale: usize) -> Self {
        let sigma = 0.5 * scale as f64;
        Self {
            scale,
            blur_sigma: sigma,
            blur_ksize: default_ksize(sigma),
        }
    }
}

pub fn degrade<T: Real>(clip: &VideoClip<T>, spec: &DegradationSpec) -> Result<VideoClip<T>> {
    if spec.scale == 0 {
        return Err(invalid("degrade", "scale must be positive"));
    }
    let blurred = gaussian_blur(&clip.frames, spec.blur_sigma, spec.blur_ksize)?;
    let frames = bicubic_resize(&blurred, Resize::Down(spec.scale))?;
    let s = spec.scale as f64;
    Ok(VideoClip {
        frames,
        keypoints: clip
            .keypoints
            .iter()
            .map(|f| f.iter().map(|&(x, y)| (x / s, y / s)).collect())
            .collect(),
        figure_height: clip.figure_height / s,
        seed: clip.seed,
    })
}

// ------------------------------------------------------------------ dataset

pub const SPLITS: [&str; 2] = ["train", "val"];
pub const SCALES: [usize; 2] = [2, 4];
/// Validation seeds start here, so the splits never share a seed.
pub const VAL_SEED_OFFSET: u64 = 1 << 40;

pub fn split_seed(base: u64, split: &str, index: usize) -> u64 {
    let off = if split == "val" { VAL_SEED_OFFSET } else { 0 };
    base.wrapping_mul(1_000_003)
        .wrapping_add(off)
        .wrapping_add(index as u64)
}

pub fn clip_dir(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join("clips").join(split).join(format!("{index:05}"))
}

pub fn keypoints_csv(keypoints: &[Vec<(f64, f64)>]) -> String {
    let mut s = String::from("frame,joint,x,y\n");
    for (t, f) in keypoints.iter().enumerate() {
        for (k, &(x, y)) in f.iter().enumerate() {
            let _ = writeln!(s, "{t},{k},{x},{y}");
        }
    }
    s
}

pub fn parse_keypoints_csv(text: &str) -> Result<Vec<Vec<(f64, f64)>>> {
    let bad = |line: usize, msg: &str| Error::Format {
        what: "keypoints.csv",
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "frame,joint,x,y" => {}
        _ => return Err(bad(1, "missing header frame,joint,x,y")),
    }
    let mut out: Vec<Vec<(f64, f64)>> = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(n + 1, "expected 4 columns"));
        }
        let t: usize = f[0].trim().parse().map_err(|_| bad(n + 1, "frame"))?;
        let k: usize = f[1].trim().parse().map_err(|_| bad(n + 1, "joint"))?;
        let x: f64 = f[2].trim().parse().map_err(|_| bad(n + 1, "x"))?;
        let y: f64 = f[3].trim().parse().map_err(|_| bad(n + 1, "y"))?;
        if t > out.len() || (t == out.len() && k != 0) || (t < out.len() && k != out[t].len()) {
            return Err(bad(n + 1, "rows out of order"));
        }
        if t == out.len() {
            out.push(Vec::new());
        }
        out[t].push((x, y));
    }
    Ok(out)
}

/// A clip as stored on disk: HR frames, both LR versions and keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredClip {
    pub hr: VideoClip<f32>,
    pub lr_x2: Tensor<f32>,
    pub lr_x4: Tensor<f32>,
}

impl StoredClip {
    pub fn lr(&self, scale: usize) -> Result<&Tensor<f32>> {
        match scale {
            2 => Ok(&self.lr_x2),
            4 => Ok(&self.lr_x4),
            s => Err(Error::Config(format!("scale must be 2 or 4, got {s}"))),
        }
    }
}

/// Renders a clip and both of its degraded versions without touching disk.
pub fn synthesize_clip(config: &SynthConfig, seed: u64) -> Result<StoredClip> {
    let hr = render_clip::<f32>(config, seed)?;
    let lr_x2 = degrade(&hr, &DegradationSpec::for_scale(2))?.frames;
    let lr_x4 = degrade(&hr, &DegradationSpec::for_scale(4))?.frames;
    Ok(StoredClip { hr, lr_x2, lr_x4 })
}

/// In-memory equivalent of [`generate_dataset`] followed by [`load_split`].
pub fn synthesize_split(config: &SynthConfig, split: &str, count: usize, seed: u64) -> Result<Vec<StoredClip>> {
    config.validate()?;
    (0..count)
        .map(|i| synthesize_clip(config, split_seed(seed, split, i)))
        .collect()
}

pub fn write_clip(dir: &Path, clip: &StoredClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    tnsr::save(dir.join("hr.tnsr"), &clip.hr.frames)?;
    for s in SCALES {
        tnsr::save(dir.join(format!("lr_x{s}.tnsr")), clip.lr(s)?)?;
    }
    let clip = &clip.hr;
    fs::write(dir.join("keypoints.csv"), keypoints_csv(&clip.keypoints))?;
    fs::write(
        dir.join("meta.txt"),
        format!("seed = {}\nfigure_height = {}\n", clip.seed, clip.figure_height),
    )?;
    Ok(())
}

fn missing(path: &Path) -> Error {
    Error::MissingFixture {
        path: path.to_path_buf(),
        command: "starpose synth --count N --seed S --out DIR".into(),
    }
}

pub fn read_clip(dir: &Path) -> Result<StoredClip> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(&p))
        }
    };
    let hr: Tensor<f32> = tnsr::load(&need("hr.tnsr")?)?;
    let lr_x2 = tnsr::load(&need("lr_x2.tnsr")?)?;
    let lr_x4 = tnsr::load(&need("lr_x4.tnsr")?)?;
    let keypoints = parse_keypoints_csv(&fs::read_to_string(need("keypoints.csv")?)?)?;
    let meta = fs::read_to_string(need("meta.txt")?)?;
    let mut seed = 0;
    let mut figure_height = f64::NAN;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "seed" => {
                    seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed in {}", dir.display())))?
                }
                "figure_height" => {
                    figure_height = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad figure height in {}", dir.display())))?
                }
                _ => {}
            }
        }
    }
    if keypoints.len() != hr.shape()[0] {
        return Err(Error::Format {
            what: "keypoints.csv",
            msg: format!("{} frames of keypoints for {} frames", keypoints.len(), hr.shape()[0]),
        });
    }
    Ok(StoredClip {
        hr: VideoClip {
            frames: hr,
            keypoints,
            figure_height,
            seed,
        },
        lr_x2,
        lr_x4,
    })
}

/// Writes `train` clips and `val` clips under `root/clips/`.
pub fn generate_dataset(root: &Path, config: &SynthConfig, train: usize, val: usize, seed: u64) -> Result<()> {
    config.validate()?;
    for (split, count) in [("train", train), ("val", val)] {
        for i in 0..count {
            let clip = synthesize_clip(config, split_seed(seed, split, i))?;
            write_clip(&clip_dir(root, split, i), &clip)?;
        }
        log::info!("wrote {count} {split} clips");
    }
    Ok(())
}

/// Number of clips present in a split (contiguous ids from 0).
pub fn count_clips(root: &Path, split: &str) -> usize {
    (0..)
        .take_while(|&i| clip_dir(root, split, i).join("hr.tnsr").exists())
        .count()
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<StoredClip>> {
    let n = count_clips(root, split);
    if n == 0 {
        return Err(missing(&root.join("clips").join(split)));
    }
    (0..n).map(|i| read_clip(&clip_dir(root, split, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn keys_kernel_partition_of_unity() {
        for f in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (0..4).map(|t| keys_cubic(f - (t as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-14, "{f}: {s}");
        }
        assert_eq!(keys_cubic(0.0), 1.0);
        assert_eq!(keys_cubic(1.0), 0.0);
        assert_eq!(keys_cubic(2.0), 0.0);
    }

    #[test]
    fn validate_rejects_oversized_figure() {
        let cfg = SynthConfig {
            figure_height: (200.0, 300.0),
            ..SynthConfig::default()
        };
        assert!(render_clip::<f32>(&cfg, 1).is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let kp = vec![vec![(1.5, 2.25), (3.0, 4.0)], vec![(5.0, 6.0), (7.0, 8.125)]];
        assert_eq!(parse_keypoints_csv(&keypoints_csv(&kp)).unwrap(), kp);
        assert!(parse_keypoints_csv("a,b\n").is_err());
        assert!(parse_keypoints_csv("frame,joint,x,y\n0,1,1,1\n").is_err());
    }

    #[test]
    fn split_seeds_disjoint() {
        let train: Vec<u64> = (0..500).map(|i| split_seed(7, "train", i)).collect();
        assert!((0..500).all(|i| !train.contains(&split_seed(7, "val", i))));
    }
}

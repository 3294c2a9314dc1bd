//! Pose-head pretraining, super-resolution training with the compound loss,
//! evaluation against the bicubic baseline, and paired ablation runs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::FeatureKind;
use crate::checkpoint::{self, meta_value};
use crate::config::{ModelConfig, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::{pck, psnr, ssim, PCK_TAU};
use crate::model::StarNet;
use crate::optim::{accumulate, collect_grads, Adam, AdamConfig, ParamStore};
use crate::pose::{
    compound_loss_var, decode_keypoints, make_heatmaps, PoseHead, HEATMAP_SIGMA, HEATMAP_STRIDE, NUM_KEYPOINTS,
};
use crate::synth::{bicubic_resize, Resize, StoredClip};
use crate::tape::{ParamId, Tape};
use crate::tensor::Tensor;

pub const POSE_WIDTHS: [usize; 3] = [16, 32, 32];
const POSE_PREFIX: &str = "pose";
/// Training clips whose full-frame loss is measured before and after training.
pub const PROBE_CLIPS: usize = 8;

/// Copy of the last two axes restricted to `[y0, y0+h) × [x0, x0+w)`.
pub fn crop_hw(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let n = s.len();
    if n < 2 || y0 + h > s[n - 2] || x0 + w > s[n - 1] {
        return Err(invalid("crop", format!("window {h}x{w} at ({y0},{x0}) outside {s:?}")));
    }
    let (sh, sw) = (s[n - 2], s[n - 1]);
    let planes = t.numel() / (sh * sw);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let base = p * sh * sw;
        for y in y0..y0 + h {
            let row = base + y * sw + x0;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    let mut shape = s.to_vec();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out)
}

fn batch1(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(s)
}

/// Clamps image values into the displayable range.
fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------- samples

/// What super-resolution training and evaluation need from one clip.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `T × 3 × h × w`.
    pub lr: Tensor<f32>,
    /// Centre HR frame, `1 × 3 × H × W`.
    pub hr: Tensor<f32>,
    /// Centre-frame target heatmaps, `1 × K × H/4 × W/4`.
    pub heatmaps: Tensor<f32>,
    pub keypoints: Vec<(f64, f64)>,
    pub figure_height: f64,
}

impl Sample {
    pub fn from_clip(clip: &StoredClip, scale: usize) -> Result<Self> {
        let lr = clip.lr(scale)?.clone();
        let c = clip.hr.center();
        let hr = batch1(clip.hr.frame(c)?)?;
        let (h, w) = clip.hr.extent();
        let keypoints = clip.hr.keypoints[c].clone();
        let set = make_heatmaps::<f32>(&keypoints, (h, w), HEATMAP_SIGMA, HEATMAP_STRIDE)?;
        Ok(Self {
            lr,
            hr,
            heatmaps: batch1(set.maps)?,
            keypoints,
            figure_height: clip.hr.figure_height,
        })
    }

    /// LR window of `size` (rows, cols) at LR origin `(y, x)` with matching
    /// HR and heatmap windows.
    fn crop(
        &self,
        y: usize,
        x: usize,
        size: (usize, usize),
        scale: usize,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let (ch, cw) = size;
        let lr = crop_hw(&self.lr, y, x, ch, cw)?;
        let hr = crop_hw(&self.hr, y * scale, x * scale, ch * scale, cw * scale)?;
        let s = HEATMAP_STRIDE;
        let hm = crop_hw(
            &self.heatmaps,
            y * scale / s,
            x * scale / s,
            (ch * scale).div_ceil(s),
            (cw * scale).div_ceil(s),
        )?;
        Ok((lr, hr, hm))
    }
}

pub fn prepare_samples(clips: &[StoredClip], scale: usize) -> Result<Vec<Sample>> {
    clips.iter().map(|c| Sample::from_clip(c, scale)).collect()
}

// ---------------------------------------------------------------- pose head

#[derive(Clone, Debug, PartialEq)]
pub struct PosePretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Side of the square HR training crop, a multiple of the heatmap stride.
    pub crop: usize,
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for PosePretrainConfig {
    fn default() -> Self {
        Self {
            widths: POSE_WIDTHS,
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            crop: 128,
            seed: 0,
        }
    }
}

pub fn new_pose_head(widths: [usize; 3], seed: u64) -> (PoseHead, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x705e);
    let head = PoseHead::new(&mut store, POSE_PREFIX, widths, NUM_KEYPOINTS, &mut rng);
    (head, store)
}

/// Trains the pose head on HR frames with a heatmap MSE, then freezes it.
/// Returns the head, its parameters and the per-step loss.
pub fn pretrain_pose(clips: &[StoredClip], cfg: &PosePretrainConfig) -> Result<(PoseHead, ParamStore<f32>, Vec<f64>)> {
    if clips.is_empty() {
        return Err(invalid("pretrain_pose", "no training clips"));
    }
    if cfg.crop == 0 || !cfg.crop.is_multiple_of(HEATMAP_STRIDE) || cfg.batch == 0 {
        return Err(Error::Config(format!(
            "pose crop {} must be a positive multiple of {HEATMAP_STRIDE}",
            cfg.crop
        )));
    }
    let (head, mut store) = new_pose_head(cfg.widths, cfg.seed);
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut losses = Vec::with_capacity(cfg.steps);
    let s = HEATMAP_STRIDE;
    for step in 0..cfg.steps {
        let mut grads = Vec::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let t = rng.gen_range(0..clip.hr.len());
            let (h, w) = clip.hr.extent();
            let (ch, cw) = (cfg.crop.min(h - h % s), cfg.crop.min(w - w % s));
            let y = rng.gen_range(0..=(h - ch) / s) * s;
            let x = rng.gen_range(0..=(w - cw) / s) * s;
            let image = crop_hw(&clip.hr.frame(t)?, y, x, ch, cw)?;
            let maps = make_heatmaps::<f32>(&clip.hr.keypoints[t], (h, w), HEATMAP_SIGMA, s)?.maps;
            let target = crop_hw(&maps, y / s, x / s, ch / s, cw / s)?;
            let mut tape = Tape::new();
            let xv = tape.constant(batch1(image)?);
            let tv = tape.constant(batch1(target)?);
            let pred = head.forward(&mut tape, &store, xv)?;
            let e = tape.sub(pred, tv)?;
            let e2 = tape.mul(e, e)?;
            let loss = tape.mean_all(e2)?;
            total += tape.value(loss).item() as f64;
            accumulate(&mut grads, collect_grads(&tape.backward(loss)?));
        }
        scale_grads(&mut grads, 1.0 / cfg.batch as f32);
        adam.step(&mut store, &grads)?;
        losses.push(total / cfg.batch as f64);
        if step % 100 == 0 {
            log::info!("pose step {step}: heatmap mse {:.5}", total / cfg.batch as f64);
        }
    }
    store.freeze_all();
    Ok((head, store, losses))
}

pub fn save_pose_head(path: &Path, head: &PoseHead, store: &ParamStore<f32>) -> Result<()> {
    let w = head.widths;
    let meta = format!(
        "kind = pose-head\nwidths = {},{},{}\nkeypoints = {}\n",
        w[0], w[1], w[2], head.keypoints
    );
    checkpoint::save(path, &meta, store)
}

/// Loads a frozen pose head. A missing file names the command that makes it.
pub fn load_pose_head(path: &Path) -> Result<(PoseHead, ParamStore<f32>)> {
    if !path.exists() {
        return Err(Error::MissingFixture {
            path: path.to_path_buf(),
            command: "starpose pretrain-pose --workdir DIR".into(),
        });
    }
    let (meta, saved) = checkpoint::load::<f32>(path)?;
    if meta_value(&meta, "kind") != Some("pose-head") {
        return Err(Error::Format {
            what: "pose head checkpoint",
            msg: format!("{} is not a pose head", path.display()),
        });
    }
    let widths: Vec<usize> = meta_value(&meta, "widths")
        .unwrap_or("")
        .split(',')
        .filter_map(|w| w.trim().parse().ok())
        .collect();
    let widths: [usize; 3] = widths.try_into().map_err(|_| Error::Format {
        what: "pose head checkpoint",
        msg: "missing or malformed widths".into(),
    })?;
    let (head, mut store) = new_pose_head(widths, 0);
    store.load_from(&saved)?;
    store.freeze_all();
    Ok((head, store))
}

// ---------------------------------------------------------------- SR training

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pixel: f64,
    pub pose: f64,
    /// Cosine between the pixel-loss and pose-loss gradients over all SR
    /// parameters, measured on log steps only.
    pub grad_cosine: Option<f64>,
}

pub const LOG_HEADER: &str = "step,lr,loss,pixel,pose,grad_cosine";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let cos = r.grad_cosine.map_or(String::new(), |c| format!("{c:.6}"));
        let _ = writeln!(
            s,
            "{},{:e},{:.8},{:.8},{:.8},{cos}",
            r.step, r.lr, r.loss, r.pixel, r.pose
        );
    }
    s
}

/// Trained network with its log and full-frame probe losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: StarNet,
    pub store: ParamStore<f32>,
    pub log: Vec<LogRow>,
    /// Mean full-frame loss on the probe clips before the first update.
    pub probe_initial: f64,
    pub probe_final: f64,
}

/// One training item: a clip index and an LR crop origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub clip: usize,
    pub y: usize,
    pub x: usize,
}

/// Crop extent actually used for a clip of LR extent `(h, w)`.
pub fn crop_extent(config: &ModelConfig, crop: usize, h: usize, w: usize) -> (usize, usize) {
    let fit = |full: usize, p: usize| {
        let c = if crop == 0 { full } else { crop.min(full) };
        c - c % p
    };
    (fit(h, config.patch.h), fit(w, config.patch.w))
}

/// Seed-fixed sampler of training batches. Crop origins keep the HR window
/// aligned to the heatmap grid.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    align: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, scale: usize) -> Self {
        let g = gcd(scale, HEATMAP_STRIDE);
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            align: HEATMAP_STRIDE / g,
        }
    }

    pub fn next_batch(
        &mut self,
        samples: &[Sample],
        config: &ModelConfig,
        crop: usize,
        batch: usize,
    ) -> Vec<BatchItem> {
        (0..batch)
            .map(|_| {
                let clip = self.rng.gen_range(0..samples.len());
                let s = samples[clip].lr.shape();
                let (h, w) = (s[2], s[3]);
                let (ch, cw) = crop_extent(config, crop, h, w);
                let a = self.align;
                let y = self.rng.gen_range(0..=(h - ch) / a) * a;
                let x = self.rng.gen_range(0..=(w - cw) / a) * a;
                BatchItem { clip, y, x }
            })
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn scale_grads(grads: &mut [(ParamId, Tensor<f32>)], c: f32) {
    for (_, g) in grads {
        g.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Loss terms for one (possibly cropped) item, optionally with gradients.
struct ItemLoss {
    total: f64,
    pixel: f64,
    pose: f64,
    grads: Vec<(ParamId, Tensor<f32>)>,
}

/// What to differentiate in [`item_loss`].
#[derive(Clone, Copy, PartialEq)]
enum Backprop {
    None,
    Total,
    Pixel,
    Pose,
}

#[allow(clippy::too_many_arguments)]
fn item_loss(
    net: &StarNet,
    store: &ParamStore<f32>,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    lr: Tensor<f32>,
    hr: Tensor<f32>,
    target: Tensor<f32>,
    backprop: Backprop,
) -> Result<ItemLoss> {
    let lambda = net.config.effective_lambda();
    let mut tape = Tape::new();
    let x = tape.constant(lr);
    let sr = net.forward(&mut tape, store, x)?;
    let pred = head.forward(&mut tape, head_store, sr)?;
    let hv = tape.constant(hr);
    let tv = tape.constant(target);
    let l = compound_loss_var(&mut tape, sr, hv, pred, tv, lambda)?;
    let (total, pixel, pose) = (
        tape.value(l.total).item() as f64,
        tape.value(l.pixel).item() as f64,
        tape.value(l.pose).item() as f64,
    );
    let root = match backprop {
        Backprop::None => None,
        Backprop::Total => Some(l.total),
        Backprop::Pixel => Some(l.pixel),
        Backprop::Pose => Some(l.pose),
    };
    let grads = match root {
        Some(r) => collect_grads(&tape.backward(r)?),
        None => Vec::new(),
    };
    Ok(ItemLoss {
        total,
        pixel,
        pose,
        grads,
    })
}

/// Mean compound loss over whole frames of `samples`, no gradients.
pub fn full_frame_loss(
    net: &StarNet,
    store: &ParamStore<f32>,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let r = item_loss(
            net,
            store,
            head,
            head_store,
            s.lr.clone(),
            s.hr.clone(),
            s.heatmaps.clone(),
            Backprop::None,
        )?;
        sum += r.total;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Batch-mean loss terms for a batch of items, without updating anything.
pub fn batch_loss(
    net: &StarNet,
    store: &ParamStore<f32>,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    samples: &[Sample],
    items: &[BatchItem],
    crop: usize,
) -> Result<(f64, f64, f64)> {
    let mut acc = (0.0, 0.0, 0.0);
    for it in items {
        let (lr, hr, hm) = crop_item(net, samples, it, crop)?;
        let r = item_loss(net, store, head, head_store, lr, hr, hm, Backprop::None)?;
        acc = (acc.0 + r.total, acc.1 + r.pixel, acc.2 + r.pose);
    }
    let n = items.len().max(1) as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

fn crop_item(
    net: &StarNet,
    samples: &[Sample],
    it: &BatchItem,
    crop: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let s = &samples[it.clip];
    let (h, w) = (s.lr.shape()[2], s.lr.shape()[3]);
    let size = crop_extent(&net.config, crop, h, w);
    s.crop(it.y, it.x, size, net.config.scale)
}

fn grad_cosine(a: &[(ParamId, Tensor<f32>)], b: &[(ParamId, Tensor<f32>)]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (id, ga) in a {
        for &x in ga.data() {
            aa += (x as f64) * (x as f64);
        }
        if let Some((_, gb)) = b.iter().find(|(j, _)| j == id) {
            for (&x, &y) in ga.data().iter().zip(gb.data()) {
                ab += (x as f64) * (y as f64);
            }
        }
    }
    for (_, gb) in b {
        bb += gb.data().iter().map(|&y| (y as f64) * (y as f64)).sum::<f64>();
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Optimizes the SR network on `train` with the compound loss; the pose head
/// stays frozen throughout.
pub fn train_sr(
    run: &RunConfig,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    train: &[Sample],
) -> Result<TrainOutcome> {
    run.validate()?;
    if train.is_empty() {
        return Err(invalid("train_sr", "no training clips"));
    }
    let (cfg, sched) = (&run.model, &run.schedule);
    let mut store = ParamStore::new();
    let net = StarNet::new(cfg, &mut store)?;
    for s in train {
        net.check_input(s.lr.shape())?;
    }
    let probe = &train[..PROBE_CLIPS.min(train.len())];
    let probe_initial = full_frame_loss(&net, &store, head, head_store, probe)?;

    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: sched.lr,
            ..AdamConfig::default()
        },
    );
    let mut sampler = BatchSampler::new(cfg.seed, cfg.scale);
    let mut log = Vec::with_capacity(sched.steps);
    let started = Instant::now();
    for step in 0..sched.steps {
        let items = sampler.next_batch(train, cfg, sched.crop, sched.batch);
        let mut grads = Vec::new();
        let mut acc = (0.0, 0.0, 0.0);
        for it in &items {
            let (lr, hr, hm) = crop_item(&net, train, it, sched.crop)?;
            let r = item_loss(&net, &store, head, head_store, lr, hr, hm, Backprop::Total)?;
            acc = (acc.0 + r.total, acc.1 + r.pixel, acc.2 + r.pose);
            accumulate(&mut grads, r.grads);
        }
        let n = items.len() as f64;
        let logged = sched.log_every > 0 && (step % sched.log_every == 0 || step + 1 == sched.steps);
        let grad_cos = if logged {
            let (lr, hr, hm) = crop_item(&net, train, &items[0], sched.crop)?;
            let p = item_loss(
                &net,
                &store,
                head,
                head_store,
                lr.clone(),
                hr.clone(),
                hm.clone(),
                Backprop::Pixel,
            )?;
            let q = item_loss(&net, &store, head, head_store, lr, hr, hm, Backprop::Pose)?;
            Some(grad_cosine(&p.grads, &q.grads))
        } else {
            None
        };
        let lr_now = sched.lr_at(step);
        let row = LogRow {
            step,
            lr: lr_now,
            loss: acc.0 / n,
            pixel: acc.1 / n,
            pose: acc.2 / n,
            grad_cosine: grad_cos,
        };
        if logged {
            log::info!(
                "step {step}: L {:.5} pixel {:.5} pose {:.6} cos {:.3} ({:.0}s)",
                row.loss,
                row.pixel,
                row.pose,
                grad_cos.unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
        }
        log.push(row);
        scale_grads(&mut grads, 1.0 / n as f32);
        adam.set_lr(lr_now);
        adam.step(&mut store, &grads)?;
    }
    let probe_final = full_frame_loss(&net, &store, head, head_store, probe)?;
    Ok(TrainOutcome {
        net,
        store,
        log,
        probe_initial,
        probe_final,
    })
}

pub fn save_sr(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let run = RunConfig {
        model: outcome.net.config.clone(),
        ..RunConfig::default()
    };
    let meta = format!("kind = star-sr\n{}", run.to_text());
    checkpoint::save(path, &meta, &outcome.store)
}

/// Rebuilds a network and its parameters from a checkpoint.
pub fn load_sr(path: &Path) -> Result<(StarNet, ParamStore<f32>)> {
    if !path.exists() {
        return Err(Error::MissingFixture {
            path: path.to_path_buf(),
            command: "starpose train-sr --workdir DIR".into(),
        });
    }
    let (meta, saved) = checkpoint::load::<f32>(path)?;
    if meta_value(&meta, "kind") != Some("star-sr") {
        return Err(Error::Format {
            what: "SR checkpoint",
            msg: format!("{} is not an SR checkpoint", path.display()),
        });
    }
    let body: String = meta
        .lines()
        .filter(|l| !l.trim_start().starts_with("kind"))
        .map(|l| format!("{l}\n"))
        .collect();
    let run = RunConfig::parse(&body)?;
    let mut store = ParamStore::new();
    let net = StarNet::new(&run.model, &mut store)?;
    store.load_from(&saved)?;
    Ok((net, store))
}

// ---------------------------------------------------------------- evaluation

pub const METRIC_NAMES: [&str; 5] = ["psnr", "ssim", "pck", "frame_ms", "heatmap_mse"];

/// Validation metrics for one method, averaged over clips except for the
/// median frame time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub psnr: f64,
    pub ssim: f64,
    pub pck: f64,
    pub frame_ms: f64,
    pub heatmap_mse: f64,
}

impl MetricSet {
    pub fn values(&self) -> [f64; 5] {
        [self.psnr, self.ssim, self.pck, self.frame_ms, self.heatmap_mse]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub scale: usize,
    pub clips: usize,
    pub model: MetricSet,
    pub bicubic: MetricSet,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,value\n");
        for (name, set) in [("model", &self.model), ("bicubic", &self.bicubic)] {
            for (m, v) in METRIC_NAMES.iter().zip(set.values()) {
                let _ = writeln!(s, "{name},{m},{v:.6}");
            }
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Scores centre-frame outputs (`1 × 3 × H × W`, one per sample) with the
/// frozen head. Outputs are clamped to `[0, 1]` first.
pub fn score_outputs(
    outputs: &[Tensor<f32>],
    frame_ms: &[f64],
    samples: &[Sample],
    head: &PoseHead,
    head_store: &ParamStore<f32>,
) -> Result<MetricSet> {
    if outputs.len() != samples.len() || samples.is_empty() {
        return Err(invalid(
            "score_outputs",
            format!("{} outputs for {} samples", outputs.len(), samples.len()),
        ));
    }
    let (mut p, mut s, mut k, mut m) = (0.0, 0.0, 0.0, 0.0);
    for (out, smp) in outputs.iter().zip(samples) {
        let img = clamp01(out);
        p += psnr(&img, &smp.hr, 1.0)?;
        s += ssim(&img, &smp.hr)?;
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let hm = head.forward(&mut tape, head_store, x)?;
        let hm = tape.value(hm);
        let planes = hm.index0(0)?;
        let pred = decode_keypoints(&planes, HEATMAP_STRIDE)?;
        k += pck(&pred, &smp.keypoints, smp.figure_height, PCK_TAU)?;
        m += hm
            .data()
            .iter()
            .zip(smp.heatmaps.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / hm.numel() as f64;
    }
    let n = samples.len() as f64;
    Ok(MetricSet {
        psnr: p / n,
        ssim: s / n,
        pck: k / n,
        frame_ms: median(frame_ms.to_vec()),
        heatmap_mse: m / n,
    })
}

pub fn bicubic_baseline(sample: &Sample, scale: usize) -> Result<Tensor<f32>> {
    let t = sample.lr.shape()[0];
    let mid = sample.lr.index0(t / 2)?;
    let up = bicubic_resize(&batch1(mid)?, Resize::Up(scale))?;
    Ok(up)
}

/// Full-frame evaluation of a network and of the bicubic baseline.
pub fn evaluate_model(
    net: &StarNet,
    store: &ParamStore<f32>,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<EvalReport> {
    let scale = net.config.scale;
    let (mut sr, mut sr_ms) = (Vec::new(), Vec::new());
    let (mut bi, mut bi_ms) = (Vec::new(), Vec::new());
    for s in samples {
        let t0 = Instant::now();
        let out = crate::model::super_resolve(&s.lr, net, store)?;
        sr_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        sr.push(out);
        let t0 = Instant::now();
        let up = bicubic_baseline(s, scale)?;
        bi_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        bi.push(up);
    }
    Ok(EvalReport {
        scale,
        clips: samples.len(),
        model: score_outputs(&sr, &sr_ms, samples, head, head_store)?,
        bicubic: score_outputs(&bi, &bi_ms, samples, head, head_store)?,
    })
}

/// Evaluates a saved SR checkpoint; `scale` must match the checkpoint's.
pub fn evaluate_checkpoint(
    path: &Path,
    clips: &[StoredClip],
    scale: usize,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
) -> Result<EvalReport> {
    let (net, store) = load_sr(path)?;
    if net.config.scale != scale {
        return Err(Error::Config(format!(
            "checkpoint {} was trained at scale {}, asked to evaluate at scale {scale}",
            path.display(),
            net.config.scale
        )));
    }
    let samples = prepare_samples(clips, scale)?;
    evaluate_model(&net, &store, head, head_store, &samples)
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Centre frame repeated instead of the real neighbours.
    TemporalContext,
    /// Plain ReLU feature map in place of the shifted-clipped leaky one.
    FeatureMap,
    /// Transformer only, no CNN branch or fusion.
    CnnBranch,
    /// Pixel loss only.
    CompoundLoss,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::TemporalContext),
            "b" => Ok(Self::FeatureMap),
            "c" => Ok(Self::CnnBranch),
            "d" => Ok(Self::CompoundLoss),
            _ => Err(Error::Config(format!(
                "ablation axis must be one of a, b, c, d; got {s:?}"
            ))),
        }
    }

    pub fn variant_name(self) -> &'static str {
        match self {
            Self::TemporalContext => "no-temporal-context",
            Self::FeatureMap => "relu-feature-map",
            Self::CnnBranch => "no-cnn-branch",
            Self::CompoundLoss => "lambda-0",
        }
    }

    /// The base configuration with this one component removed.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Self::TemporalContext => c.temporal_context = false,
            Self::FeatureMap => c.phi = FeatureKind::Relu,
            Self::CnnBranch => c.cnn_branch = false,
            Self::CompoundLoss => c.lambda = 0.0,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

pub fn run_variant(
    name: &str,
    run: &RunConfig,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    train: &[Sample],
    val: &[Sample],
) -> Result<VariantResult> {
    log::info!("training variant {name}");
    let outcome = train_sr(run, head, head_store, train)?;
    let report = evaluate_model(&outcome.net, &outcome.store, head, head_store, val)?;
    Ok(VariantResult {
        name: name.to_string(),
        outcome,
        report,
    })
}

pub const ABLATION_HEADER: &str = "variant,metric,value";

/// One row per variant per metric: the five model metrics, then the probe losses.
pub fn ablation_csv(results: &[VariantResult]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in results {
        for (m, v) in METRIC_NAMES.iter().zip(r.report.model.values()) {
            let _ = writeln!(s, "{},{m},{v:.6}", r.name);
        }
        let _ = writeln!(s, "{},probe_loss_initial,{:.6}", r.name, r.outcome.probe_initial);
        let _ = writeln!(s, "{},probe_loss_final,{:.6}", r.name, r.outcome.probe_final);
    }
    s
}

/// Trains the base configuration and its ablated variant with identical
/// seeds and budgets.
pub fn run_ablation(
    axis: AblationAxis,
    base: &RunConfig,
    head: &PoseHead,
    head_store: &ParamStore<f32>,
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<VariantResult>> {
    let ablated = RunConfig {
        model: axis.apply(&base.model),
        ..base.clone()
    };
    Ok(vec![
        run_variant("base", base, head, head_store, train, val)?,
        run_variant(axis.variant_name(), &ablated, head, head_store, train, val)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_split, SynthConfig};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig {
            model: ModelConfig {
                layers: 1,
                heads: 2,
                dim: 16,
                channels: 4,
                fused_stages: 1,
                mbconv_stages: 0,
                d_pe: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        run.schedule.steps = 3;
        run.schedule.batch = 2;
        run.schedule.crop = 8;
        run.schedule.log_every = 2;
        run
    }

    fn tiny_data() -> Vec<Sample> {
        let cfg = SynthConfig {
            height: 96,
            width: 64,
            figure_height: (30.0, 36.0),
            ..SynthConfig::default()
        };
        prepare_samples(&synthesize_split(&cfg, "train", 3, 5).unwrap(), 4).unwrap()
    }

    #[test]
    fn crop_windows_line_up() {
        let data = tiny_data();
        let s = &data[0];
        let (lr, hr, hm) = s.crop(4, 0, (8, 8), 4).unwrap();
        assert_eq!(lr.shape(), &[5, 3, 8, 8]);
        assert_eq!(hr.shape(), &[1, 3, 32, 32]);
        assert_eq!(hm.shape(), &[1, 15, 8, 8]);
        assert_eq!(hr.at(&[0, 1, 0, 0]), s.hr.at(&[0, 1, 16, 0]));
        assert_eq!(hm.at(&[0, 2, 1, 3]), s.heatmaps.at(&[0, 2, 5, 3]));
    }

    #[test]
    fn step_zero_loss_is_reproducible_and_lambda_zero_is_pixel_only() {
        let data = tiny_data();
        let (head, hs) = new_pose_head(POSE_WIDTHS, 1);
        let mut hs = hs;
        hs.freeze_all();
        let run = tiny_run();
        let out = train_sr(&run, &head, &hs, &data).unwrap();
        let mut fresh = ParamStore::new();
        let net = StarNet::new(&run.model, &mut fresh).unwrap();
        let mut sampler = BatchSampler::new(run.model.seed, run.model.scale);
        let items = sampler.next_batch(&data, &run.model, run.schedule.crop, run.schedule.batch);
        let (l, _, _) = batch_loss(&net, &fresh, &head, &hs, &data, &items, run.schedule.crop).unwrap();
        assert_eq!(l, out.log[0].loss);
        assert!(out.log[0].grad_cosine.is_some() && out.log[1].grad_cosine.is_none());

        let again = train_sr(&run, &head, &hs, &data).unwrap();
        assert_eq!(again.log, out.log);

        let mut zero = run.clone();
        zero.model.lambda = 0.0;
        let z = train_sr(&zero, &head, &hs, &data).unwrap();
        for r in &z.log {
            assert_eq!(r.loss, r.pixel);
            assert!(r.pose > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let data = tiny_data();
        let (head, mut hs) = new_pose_head(POSE_WIDTHS, 2);
        hs.freeze_all();
        let out = train_sr(&tiny_run(), &head, &hs, &data).unwrap();
        let before = evaluate_model(&out.net, &out.store, &head, &hs, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sr.stck");
        save_sr(&path, &out).unwrap();
        let (net, store) = load_sr(&path).unwrap();
        assert_eq!(store, out.store);
        let after = evaluate_model(&net, &store, &head, &hs, &data).unwrap();
        assert_eq!(before.model.psnr, after.model.psnr);
        assert_eq!(before.model.pck, after.model.pck);
        assert_eq!(before.model.heatmap_mse, after.model.heatmap_mse);
    }

    #[test]
    fn ground_truth_output_scores_as_upper_bound() {
        let data = tiny_data();
        let (head, hs) = new_pose_head(POSE_WIDTHS, 3);
        let hr: Vec<_> = data.iter().map(|s| s.hr.clone()).collect();
        let m = score_outputs(&hr, &[0.0; 3], &data, &head, &hs).unwrap();
        assert_eq!(m.psnr, 99.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let direct: f64 = data
            .iter()
            .map(|s| {
                let hm = crate::pose::pose_forward(&s.hr, &head, &hs).unwrap();
                let pred = decode_keypoints(&hm.index0(0).unwrap(), HEATMAP_STRIDE).unwrap();
                pck(&pred, &s.keypoints, s.figure_height, PCK_TAU).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert_eq!(m.pck, direct);
    }

    #[test]
    fn ablation_axes_change_one_field() {
        let base = ModelConfig::desk();
        let d = AblationAxis::parse("d").unwrap().apply(&base);
        assert_eq!(
            d,
            ModelConfig {
                lambda: 0.0,
                ..base.clone()
            }
        );
        let b = AblationAxis::FeatureMap.apply(&base);
        assert_eq!(
            b,
            ModelConfig {
                phi: FeatureKind::Relu,
                ..base.clone()
            }
        );
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        StarNet::new(&base, &mut s1).unwrap();
        StarNet::new(&b, &mut s2).unwrap();
        assert_eq!(s1, s2);
        assert!(AblationAxis::parse("e").is_err());
    }
}

//! Model and training configuration, flat `key = value` files and the
//! `STAR_SEED` override.

use std::fmt::Write as _;
use std::path::Path;

use crate::attention::FeatureKind;
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::pose::DEFAULT_LAMBDA;

pub const SEED_ENV: &str = "STAR_SEED";
/// LR crop side used by the desk preset.
pub const DESK_CROP: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch: Patch,
    pub channels: usize,
    pub fused_stages: usize,
    pub mbconv_stages: usize,
    /// Per-axis sinusoid width; the concatenated table is `3·d_pe` wide.
    pub d_pe: usize,
    pub scale: usize,
    pub lambda: f64,
    pub phi: FeatureKind,
    pub temporal_context: bool,
    pub cnn_branch: bool,
    pub compound_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            layers: 8,
            heads: 8,
            dim: 256,
            patch: Patch::new(1, 4, 4),
            channels: 64,
            fused_stages: 3,
            mbconv_stages: 5,
            d_pe: 64,
            scale: 4,
            lambda: DEFAULT_LAMBDA,
            phi: FeatureKind::ScLeaky,
            temporal_context: true,
            cnn_branch: true,
            compound_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and depth that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 8,
            dim: 32,
            channels: 8,
            fused_stages: 1,
            mbconv_stages: 1,
            d_pe: 8,
            ..Self::default()
        }
    }

    /// Weight of the pose term actually used in the loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.compound_loss {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.layers == 0 || self.heads == 0 || self.dim == 0 || self.channels == 0 {
            return bad("frames, layers, heads, dim and channels must be positive".into());
        }
        if self.patch.t == 0 || self.patch.h == 0 || self.patch.w == 0 {
            return bad(format!("patch {:?} has a zero extent", self.patch));
        }
        if !self.frames.is_multiple_of(self.patch.t) {
            return bad(format!(
                "frames {} not divisible by temporal patch {}",
                self.frames, self.patch.t
            ));
        }
        if self.patch.t != 1 {
            return bad("temporal patch extent must be 1 so the centre frame can be folded back".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(self.patch.volume()) {
            return bad(format!(
                "dim {} not divisible by patch volume {}",
                self.dim,
                self.patch.volume()
            ));
        }
        if self.d_pe == 0 || !self.d_pe.is_multiple_of(2) {
            return bad(format!("d_pe {} must be even and positive", self.d_pe));
        }
        if self.scale != 2 && self.scale != 4 {
            return bad(format!("scale must be 2 or 4, got {}", self.scale));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.cnn_branch && self.fused_stages + self.mbconv_stages != self.layers {
            return bad(format!(
                "cnn stages ({} fused + {} mbconv) must pair with {} transformer layers",
                self.fused_stages, self.mbconv_stages, self.layers
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fractions of `steps` at which the learning rate drops 10×.
    pub decays: [f64; 2],
    /// Side of the square LR training crop; 0 trains on full frames.
    pub crop: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    /// Steps between progress log lines.
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            decays: [170.0 / 300.0, 260.0 / 300.0],
            crop: 0,
            train_clips: 200,
            val_clips: 50,
            log_every: 50,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.decays;
        if !(0.0 < a && a < b && b <= 1.0) {
            return Err(Error::Config(format!(
                "decay points {a}, {b} must be strictly increasing in (0, 1]"
            )));
        }
        if self.batch == 0 || self.lr <= 0.0 {
            return Err(Error::Config("batch and lr must be positive".into()));
        }
        Ok(())
    }

    /// `lr`, then `lr/10` from the first decay point, `lr/100` from the second.
    pub fn lr_at(&self, step: usize) -> f64 {
        let f = step as f64 / self.steps.max(1) as f64;
        if f >= self.decays[1] {
            self.lr * 1e-2
        } else if f >= self.decays[0] {
            self.lr * 1e-1
        } else {
            self.lr
        }
    }
}

/// Everything a run needs, as read from one config file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Desk-scale model trained on random LR crops.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            schedule: TrainSchedule {
                crop: DESK_CROP,
                ..TrainSchedule::default()
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, s) = (&mut self.model, &mut self.schedule);
        match key {
            "frames" | "T" => m.frames = parse_num(key, value)?,
            "layers" => m.layers = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "dim" | "D" => m.dim = parse_num(key, value)?,
            "patch" => {
                let p: Vec<usize> = value
                    .split(',')
                    .map(|x| parse_num(key, x.trim()))
                    .collect::<Result<_>>()?;
                if p.len() != 3 {
                    return Err(Error::Config(format!("patch: expected t,h,w, got {value:?}")));
                }
                m.patch = Patch::new(p[0], p[1], p[2]);
            }
            "channels" | "C" => m.channels = parse_num(key, value)?,
            "fused_stages" => m.fused_stages = parse_num(key, value)?,
            "mbconv_stages" => m.mbconv_stages = parse_num(key, value)?,
            "d_pe" => m.d_pe = parse_num(key, value)?,
            "scale" => m.scale = parse_num(key, value)?,
            "lambda" => m.lambda = parse_num(key, value)?,
            "phi" => {
                m.phi = FeatureKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("phi: expected scleaky, relu or elu1, got {value:?}")))?
            }
            "temporal_context" => m.temporal_context = parse_bool(key, value)?,
            "cnn_branch" => m.cnn_branch = parse_bool(key, value)?,
            "compound_loss" => m.compound_loss = parse_bool(key, value)?,
            "seed" => m.seed = parse_num(key, value)?,
            "steps" => s.steps = parse_num(key, value)?,
            "batch" => s.batch = parse_num(key, value)?,
            "lr" => s.lr = parse_num(key, value)?,
            "decays" => {
                let d: Vec<f64> = value
                    .split(',')
                    .map(|x| parse_num(key, x.trim()))
                    .collect::<Result<_>>()?;
                if d.len() != 2 {
                    return Err(Error::Config(format!("decays: expected two fractions, got {value:?}")));
                }
                s.decays = [d[0], d[1]];
            }
            "crop" => s.crop = parse_num(key, value)?,
            "train_clips" => s.train_clips = parse_num(key, value)?,
            "val_clips" => s.val_clips = parse_num(key, value)?,
            "log_every" => s.log_every = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides the seed from `STAR_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.model.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()
    }

    pub fn to_text(&self) -> String {
        let (m, s) = (&self.model, &self.schedule);
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut t = String::new();
        let _ = writeln!(t, "frames = {}", m.frames);
        let _ = writeln!(t, "layers = {}", m.layers);
        let _ = writeln!(t, "heads = {}", m.heads);
        let _ = writeln!(t, "dim = {}", m.dim);
        let _ = writeln!(t, "patch = {},{},{}", m.patch.t, m.patch.h, m.patch.w);
        let _ = writeln!(t, "channels = {}", m.channels);
        let _ = writeln!(t, "fused_stages = {}", m.fused_stages);
        let _ = writeln!(t, "mbconv_stages = {}", m.mbconv_stages);
        let _ = writeln!(t, "d_pe = {}", m.d_pe);
        let _ = writeln!(t, "scale = {}", m.scale);
        let _ = writeln!(t, "lambda = {}", m.lambda);
        let _ = writeln!(t, "phi = {}", m.phi.name());
        let _ = writeln!(t, "temporal_context = {}", onoff(m.temporal_context));
        let _ = writeln!(t, "cnn_branch = {}", onoff(m.cnn_branch));
        let _ = writeln!(t, "compound_loss = {}", onoff(m.compound_loss));
        let _ = writeln!(t, "seed = {}", m.seed);
        let _ = writeln!(t, "steps = {}", s.steps);
        let _ = writeln!(t, "batch = {}", s.batch);
        let _ = writeln!(t, "lr = {}", s.lr);
        let _ = writeln!(t, "decays = {},{}", s.decays[0], s.decays[1]);
        let _ = writeln!(t, "crop = {}", s.crop);
        let _ = writeln!(t, "train_clips = {}", s.train_clips);
        let _ = writeln!(t, "val_clips = {}", s.val_clips);
        let _ = writeln!(t, "log_every = {}", s.log_every);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let m = ModelConfig::default();
        assert_eq!((m.frames, m.layers, m.heads, m.dim), (5, 8, 8, 256));
        assert_eq!(m.lambda, 10.0);
        assert!(m.validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn schedule_decays() {
        let s = TrainSchedule {
            steps: 300,
            ..TrainSchedule::default()
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(169), 1e-3);
        assert_eq!(s.lr_at(170), 1e-4);
        assert_eq!(s.lr_at(260), 1e-5);
        let bad = TrainSchedule {
            decays: [0.8, 0.5],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mut c = RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        };
        c.model.phi = FeatureKind::Relu;
        c.model.cnn_branch = false;
        c.schedule.crop = 16;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::parse("dim = 250 # not divisible by heads\n").is_err());
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("lambda = -1").is_err());
        assert!(RunConfig::parse("fused_stages = 2").is_err());
    }
}

//! Training configuration as flat `key = value` text.
//!
//! ```text
//! # desk-scale run
//! content_dir = data/photos
//! style_dir = data/paintings
//! crop = 64
//! loss.illumination = 0
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{CodecLayout, Depth, MIN_SIDE};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mcc::FusionMode;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    /// Checkpoints and `metrics.jsonl` go here; `None` keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    /// `MCCW1` encoder weights. Without it a seeded random stand-in with the
    /// VGG19 topology is used.
    pub encoder: Option<PathBuf>,
    pub encoder_seed: u64,
    pub base_width: usize,
    pub crop: usize,
    pub batch: usize,
    pub steps: u64,
    pub depth: Depth,
    pub mode: FusionMode,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Short side is scaled down to this before cropping when larger.
    pub max_short_side: usize,
    pub loss: LossWeights,
    pub noise_sigma: f64,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            content_dir: PathBuf::new(),
            style_dir: PathBuf::new(),
            out_dir: None,
            encoder: None,
            encoder_seed: 0,
            base_width: CodecLayout::vgg19().base_width,
            crop: 256,
            batch: 8,
            steps: 160_000,
            depth: Depth::Deep,
            mode: FusionMode::MultiChannel,
            learning_rate: 1e-4,
            seed: 0,
            checkpoint_every: 5_000,
            max_short_side: 512,
            loss: LossWeights::default(),
            noise_sigma: 0.01,
            resume: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Small-image recipe that trains in minutes on one CPU core: 64x64
    /// crops, batch 4, 500 steps, codec widths divided by 8.
    pub fn desk(content_dir: impl Into<PathBuf>, style_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            content_dir: content_dir.into(),
            style_dir: style_dir.into(),
            base_width: 8,
            crop: 64,
            batch: 4,
            steps: 500,
            checkpoint_every: 100,
            ..Default::default()
        }
    }

    pub fn layout(&self) -> CodecLayout {
        CodecLayout::narrow(self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let factor = self.depth.factor();
        if self.crop < MIN_SIDE || !self.crop.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "crop {} must be >= {MIN_SIDE} and divisible by {factor} for the {} codec",
                self.crop, self.depth
            )));
        }
        if self.max_short_side < self.crop {
            return Err(Error::Config("max_short_side must be >= crop".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("loss.noise_sigma must be >= 0".into()));
        }
        let w = &self.loss;
        for (k, v) in [
            ("loss.content", w.content),
            ("loss.style", w.style),
            ("loss.identity", w.identity),
            ("loss.illumination", w.illumination),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "content_dir" => self.content_dir = PathBuf::from(value),
            "style_dir" => self.style_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = optional_path(value),
            "encoder" => self.encoder = optional_path(value),
            "encoder_seed" => self.encoder_seed = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "depth" => self.depth = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "max_short_side" => self.max_short_side = parse(key, value)?,
            "loss.content" => self.loss.content = parse(key, value)?,
            "loss.style" => self.loss.style = parse(key, value)?,
            "loss.identity" => self.loss.identity = parse(key, value)?,
            "loss.illumination" => self.loss.illumination = parse(key, value)?,
            "loss.noise_sigma" => self.noise_sigma = parse(key, value)?,
            "resume" => self.resume = optional_path(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("content_dir", self.content_dir.display().to_string());
        kv("style_dir", self.style_dir.display().to_string());
        kv("out_dir", path(&self.out_dir));
        kv("encoder", path(&self.encoder));
        kv("encoder_seed", self.encoder_seed.to_string());
        kv("base_width", self.base_width.to_string());
        kv("crop", self.crop.to_string());
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("depth", self.depth.to_string());
        kv("mode", self.mode.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("max_short_side", self.max_short_side.to_string());
        kv("loss.content", self.loss.content.to_string());
        kv("loss.style", self.loss.style.to_string());
        kv("loss.identity", self.loss.identity.to_string());
        kv("loss.illumination", self.loss.illumination.to_string());
        kv("loss.noise_sigma", self.noise_sigma.to_string());
        kv("resume", path(&self.resume));
        s
    }
}

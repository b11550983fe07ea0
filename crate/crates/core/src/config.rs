//! Experiment configuration and its plain-text `key=value` form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Frames sampled per video.
    pub frames: usize,
    /// Random flip and brightness jitter during training.
    pub augment: bool,
}

/// Learning rate used for fine-tuning a pretrained backbone; too small for
/// from-scratch training at desk scale.
pub const FULL_SCALE_LR: f64 = 1e-5;
pub const FULL_SCALE_EPOCHS: usize = 50;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            lr: 5e-4,
            epochs: 15,
            batch_size: 1,
            k: 5,
            seeds: vec![1, 2, 3, 4, 5],
            frames: 16,
            augment: true,
        }
    }
}

const KEYS: &[&str] = &[
    "feature_mode",
    "attn_variant",
    "scale_mode",
    "image_average_mode",
    "height",
    "width",
    "channels",
    "patch",
    "d_model",
    "n_layers",
    "n_heads",
    "d_out",
    "share_encoder",
    "head_hidden",
    "lr",
    "epochs",
    "batch_size",
    "k",
    "seeds",
    "frames",
    "augment",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number {v:?}"))
}

fn parse_text<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid boolean {v:?}")),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.frames == 0 {
            return Err(Error::Config(
                "batch_size and frames must be positive".into(),
            ));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Set one field from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "feature_mode" => m.feature_mode = parse_text(value)?,
            "attn_variant" => m.attn_variant = parse_text(value)?,
            "scale_mode" => m.scale_mode = parse_text(value)?,
            "image_average_mode" => m.image_average_mode = parse_text(value)?,
            "height" => e.height = parse_num(value)?,
            "width" => e.width = parse_num(value)?,
            "channels" => e.channels = parse_num(value)?,
            "patch" => e.patch = parse_num(value)?,
            "d_model" => e.d_model = parse_num(value)?,
            "n_layers" => e.n_layers = parse_num(value)?,
            "n_heads" => e.n_heads = parse_num(value)?,
            "d_out" => e.d_out = parse_num(value)?,
            "share_encoder" => m.share_encoder = parse_bool(value)?,
            "head_hidden" => m.head_hidden = parse_num(value)?,
            "lr" => self.lr = parse_num(value)?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "k" => self.k = parse_num(value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "frames" => self.frames = parse_num(value)?,
            "augment" => self.augment = parse_bool(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        let e = &m.encoder;
        match key {
            "feature_mode" => m.feature_mode.to_string(),
            "attn_variant" => m.attn_variant.to_string(),
            "scale_mode" => m.scale_mode.to_string(),
            "image_average_mode" => m.image_average_mode.to_string(),
            "height" => e.height.to_string(),
            "width" => e.width.to_string(),
            "channels" => e.channels.to_string(),
            "patch" => e.patch.to_string(),
            "d_model" => e.d_model.to_string(),
            "n_layers" => e.n_layers.to_string(),
            "n_heads" => e.n_heads.to_string(),
            "d_out" => e.d_out.to_string(),
            "share_encoder" => m.share_encoder.to_string(),
            "head_hidden" => m.head_hidden.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "k" => self.k.to_string(),
            "seeds" => self
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "frames" => self.frames.to_string(),
            "augment" => self.augment.to_string(),
            _ => unreachable!("unknown config key {key}"),
        }
    }

    /// `(key, value)` pairs in canonical order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|&k| (k.to_string(), self.get(k))).collect()
    }

    /// Parse `key=value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors. All offending lines
    /// are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let outcome = match line.split_once('=') {
                Some((k, v)) => cfg.set(k.trim(), v.trim()),
                None => Err("expected key=value".to_string()),
            };
            if let Err(msg) = outcome {
                errors.push(format!("line {}: {msg}", i + 1));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v).map_err(Error::Config)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

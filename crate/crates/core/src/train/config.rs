//! Training configuration, read from flat `key = value` text with optional
//! environment overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::landmark_net::LandmarkNetConfig;
use crate::losses::LossWeights;

/// Environment variables named `FACEFILL_<KEY>` override file values.
pub const ENV_PREFIX: &str = "FACEFILL_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full channel widths.
    Full,
    /// Quartered channel widths for small frames.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Center,
    Block,
    Irregular,
    /// Even split between irregular files and random blocks.
    Mixed,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at `max_steps`.
    Cosine,
}

/// Which landmarks render the generator's conditioning map during training.
/// The discriminator always sees ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSource {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub image_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_landmark: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_schedule: LrSchedule,
    pub batch_landmark: usize,
    pub batch_inpaint: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub use_lsta: bool,
    pub use_landmark_channel: bool,
    pub use_discriminator_attention: bool,
    pub mask_source: MaskKind,
    pub mask_dir: Option<PathBuf>,
    pub block_coverage_min: f64,
    pub block_coverage_max: f64,
    pub landmark_source: LandmarkSource,
    pub lambda_perceptual: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
    pub lambda_adversarial: f64,
    pub vgg_weights: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            profile: Profile::Full,
            image_size: 256,
            lr_generator: 1e-4,
            lr_discriminator: 1e-5,
            lr_landmark: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            lr_schedule: LrSchedule::Constant,
            batch_landmark: 16,
            batch_inpaint: 4,
            max_steps: 100_000,
            seed: 0,
            use_lsta: true,
            use_landmark_channel: true,
            use_discriminator_attention: true,
            mask_source: MaskKind::Mixed,
            mask_dir: None,
            block_coverage_min: 0.1,
            block_coverage_max: 0.5,
            landmark_source: LandmarkSource::GroundTruth,
            lambda_perceptual: w.perceptual,
            lambda_style: w.style,
            lambda_tv: w.tv,
            lambda_adversarial: w.adversarial,
            vgg_weights: None,
            checkpoint_every: 1000,
            output_dir: None,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl TrainConfig {
    /// 64×64 frames with the reduced-width networks.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            image_size: 64,
            ..Self::default()
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys absent from the
    /// text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(Self::pairs(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `text`, then applies `FACEFILL_*` entries from `env`.
    pub fn parse_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut pairs = Self::pairs(text)?;
        let known = Self::keys();
        for (k, v) in env {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if known.contains(&key) {
                pairs.push((key, v));
            }
        }
        Self::from_pairs(pairs)
    }

    /// Every recognized key, in declaration order.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    fn pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut map = Map::new();
        for (k, v) in pairs {
            map.insert(k, parse_value(&v));
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the same `key = value` form `parse` accepts.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(m)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in m {
            match v {
                Value::Null => out.push_str(&format!("# {k} =\n")),
                Value::String(s) => out.push_str(&format!("{k} = {s}\n")),
                other => out.push_str(&format!("{k} = {other}\n")),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_landmark", self.lr_landmark),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.batch_landmark == 0 || self.batch_inpaint == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a multiple of 8 and at least 32", self.image_size));
        }
        let (lo, hi) = (self.block_coverage_min, self.block_coverage_max);
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("block coverage range [{lo}, {hi}] must satisfy 0 < min <= max < 1"));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if matches!(self.mask_source, MaskKind::Irregular | MaskKind::Mixed) && self.mask_dir.is_none() {
            return bad(format!("mask_source = {:?} requires mask_dir", self.mask_source).to_lowercase());
        }
        self.loss_weights().validate()
    }

    /// Learning rate at `step` for an optimizer whose base rate is `base`.
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step.min(self.max_steps) as f64 / self.max_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.lambda_perceptual,
            style: self.lambda_style,
            tv: self.lambda_tv,
            adversarial: self.lambda_adversarial,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let base = match self.profile {
            Profile::Full => GeneratorConfig::default(),
            Profile::Desk => GeneratorConfig::desk(),
        };
        GeneratorConfig {
            image_size: self.image_size,
            use_lsta: self.use_lsta,
            use_landmark_channel: self.use_landmark_channel,
            ..base
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let base = match self.profile {
            Profile::Full => DiscriminatorConfig::default(),
            Profile::Desk => DiscriminatorConfig::desk(),
        };
        DiscriminatorConfig {
            image_size: self.image_size,
            use_attention: self.use_discriminator_attention,
            use_landmark_channel: self.use_landmark_channel,
            ..base
        }
    }

    pub fn landmark_config(&self) -> LandmarkNetConfig {
        let base = match self.profile {
            Profile::Full => LandmarkNetConfig::default(),
            Profile::Desk => LandmarkNetConfig::desk(),
        };
        LandmarkNetConfig {
            input_size: self.image_size,
            ..base
        }
    }
}

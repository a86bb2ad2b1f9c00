//! Run configuration: model shape, optimizer, loss weights and data paths.
//!
//! Stored as JSON with a schema version; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CatrError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that overrides `optim.seed`.
pub const SEED_ENV: &str = "CATR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub gate_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Backbone strides feeding the mask-feature pyramid; must include 8.
    #[serde(default = "default_fpn")]
    pub fpn_strides: Vec<usize>,
    /// When false only the last encoder block feeds the decoder.
    #[serde(default = "yes")]
    pub use_gate: bool,
    /// When false the temporal audio-to-video step is skipped in every block.
    #[serde(default = "yes")]
    pub use_temporal_av: bool,
}

fn default_fpn() -> Vec<usize> {
    vec![8]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Learning rate is held, then decayed linearly to `lr * final_lr_fraction`
    /// over the last `decay_fraction` of the steps.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub decay_fraction: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_ref: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_dice: 5.0, lambda_focal: 2.0, lambda_ref: 2.0, gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train_dir: Option<PathBuf>,
    #[serde(default)]
    pub eval_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("decoder_layers", self.decoder_layers),
            ("gate_channels", self.gate_channels),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CatrError::Validation(format!("model.{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(4) {
            return Err(CatrError::Validation(format!("model.channels {} must be a multiple of 4", self.channels)));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(CatrError::Validation(format!(
                "model.heads {} must divide model.channels {}",
                self.heads, self.channels
            )));
        }
        if !self.channels.is_multiple_of(self.gate_channels) {
            return Err(CatrError::Validation(format!(
                "model.gate_channels {} must divide model.channels {}",
                self.gate_channels, self.channels
            )));
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(CatrError::Validation(format!(
                "frame size {}x{} must be divisible by 8",
                self.height, self.width
            )));
        }
        if !self.fpn_strides.contains(&8) || self.fpn_strides.iter().any(|s| ![2, 4, 8].contains(s)) {
            return Err(CatrError::Validation(format!(
                "model.fpn_strides {:?} must include 8 and use only 2, 4, 8",
                self.fpn_strides
            )));
        }
        Ok(())
    }

    /// Grid of the stride-8 feature map.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }
}

impl RunConfig {
    /// Desk-scale preset used for the end-to-end experiments.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig {
                channels: 64,
                blocks: 2,
                heads: 4,
                num_queries: 8,
                decoder_layers: 3,
                gate_channels: 64,
                frames: 5,
                height: 64,
                width: 64,
                fpn_strides: default_fpn(),
                use_gate: true,
                use_temporal_av: true,
            },
            optim: OptimConfig {
                lr: 1e-4,
                steps: 2000,
                batch_size: 4,
                seed: 0,
                beta1: beta1(),
                beta2: beta2(),
                eps: adam_eps(),
                clip_norm: None,
                final_lr_fraction: 1.0,
                decay_fraction: 0.0,
                checkpoint_every: 0,
            },
            // Per-cell cross-entropy (focal with γ = 0, α = 0.5) keeps the
            // stride-8 probabilities calibrated to area fractions; a dice-heavy
            // mix saturates them and blurs boundaries after upsampling.
            loss: LossConfig { lambda_dice: 1.0, lambda_focal: 10.0, lambda_ref: 2.0, gamma: 0.0, alpha: 0.5 },
            data: DataConfig::default(),
        }
    }

    /// Published training settings: batch 4, learning rate 1e-5, 50 queries,
    /// 256 channels. Not expected to run at full scale on a desk machine.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.model.channels = 256;
        cfg.model.heads = 8;
        cfg.model.num_queries = 50;
        cfg.model.gate_channels = 256;
        cfg.model.height = 224;
        cfg.model.width = 224;
        cfg.optim.lr = 1e-5;
        cfg.optim.batch_size = 4;
        cfg.loss = LossConfig::default();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(CatrError::Validation(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CatrError::Validation(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        let o = &self.optim;
        if o.steps == 0 || o.batch_size == 0 {
            return Err(CatrError::Validation("optim.steps and optim.batch_size must be positive".into()));
        }
        let reals = [
            ("optim.lr", o.lr),
            ("optim.eps", o.eps),
            ("loss.alpha", self.loss.alpha),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(CatrError::Validation(format!("{name} must be positive and finite")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(CatrError::Validation("optim betas must lie in [0, 1)".into()));
        }
        if !(self.loss.gamma.is_finite() && self.loss.gamma >= 0.0) {
            return Err(CatrError::Validation("loss.gamma must be non-negative".into()));
        }
        if self.loss.alpha >= 1.0 {
            return Err(CatrError::Validation("loss.alpha must lie in (0, 1)".into()));
        }
        for (name, v) in [
            ("loss.lambda_dice", self.loss.lambda_dice),
            ("loss.lambda_focal", self.loss.lambda_focal),
            ("loss.lambda_ref", self.loss.lambda_ref),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CatrError::Validation(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&o.decay_fraction) || !(0.0..=1.0).contains(&o.final_lr_fraction) {
            return Err(CatrError::Validation("optim decay settings must lie in [0, 1]".into()));
        }
        if let Some(c) = o.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(CatrError::Validation("optim.clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at a zero-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let o = &self.optim;
        let decay_steps = (o.decay_fraction * o.steps as f64).round() as usize;
        let start = o.steps - decay_steps;
        if decay_steps == 0 || step < start {
            return o.lr;
        }
        let frac = (step - start + 1) as f64 / decay_steps as f64;
        o.lr * (1.0 - frac * (1.0 - o.final_lr_fraction))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CatrError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CatrError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CatrError::Validation(m) => CatrError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| CatrError::io(path, e))
    }

    /// Applies `CATR_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.optim.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CatrError::Validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }
}

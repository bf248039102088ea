//! Experiment configuration: JSON file with defaults, ablation toggles and
//! the eight named variant rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    AlphaMode, LayoutMode, LossWeights, ModelConfig, TrainConfig, UNetConfig, CAPTION_DROPOUT, DEFAULT_GUIDANCE, DEFAULT_SAMPLE_STEPS,
};
use crate::fusion_attention::FusionDomain;
use crate::losses::DEFAULT_LAMBDA;
use crate::synth_data::class_names;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    MalformedConfig(String),
    #[error("conflicting toggles: {0}")]
    ConflictingToggles(String),
}

/// α used by the fixed-α variants.
pub const FIXED_ALPHA: f64 = 1.0;

/// The four ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub layout: LayoutMode,
    pub adaptive_alpha: bool,
    pub sa: bool,
    pub lfp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { layout: LayoutMode::Lcm, adaptive_alpha: true, sa: true, lfp: true }
    }
}

/// Toggles of variant rows 1–8.
pub fn variant_row(row: u8) -> Option<Toggles> {
    use LayoutMode::{Lcm, Nearest};
    let t = |layout, adaptive_alpha, sa, lfp| Some(Toggles { layout, adaptive_alpha, sa, lfp });
    match row {
        1 => t(Nearest, false, false, false),
        2 => t(Lcm, false, false, false),
        3 => t(Nearest, true, false, false),
        4 => t(Nearest, false, true, false),
        5 => t(Lcm, true, false, false),
        6 => t(Lcm, true, true, false),
        7 => t(Lcm, true, false, true),
        8 => t(Lcm, true, true, true),
        _ => None,
    }
}

/// File form: every field optional so explicit settings can be told apart
/// from defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub variant: Option<u8>,
    pub dataset: Option<PathBuf>,
    pub lf_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lambda_sa: Option<f64>,
    pub lambda_lfp: Option<f64>,
    pub fusion_domain: Option<FusionDomain>,
    pub guidance: Option<f64>,
    pub steps: Option<usize>,
    pub clip_x0: Option<bool>,
    pub layout: Option<LayoutMode>,
    pub adaptive_alpha: Option<bool>,
    pub sa: Option<bool>,
    pub lfp: Option<bool>,
    pub train_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lf_batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub caption_dropout: Option<f64>,
    pub model: Option<UNetConfig>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Option<u8>,
    pub dataset: Option<PathBuf>,
    pub lf_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub lambda_sa: f64,
    pub lambda_lfp: f64,
    pub fusion_domain: FusionDomain,
    pub guidance: f64,
    /// Sampling steps.
    pub steps: usize,
    /// Clamp x̂0 to the image range while sampling.
    pub clip_x0: bool,
    pub toggles: Toggles,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lf_batch_size: usize,
    pub lr: f64,
    pub caption_dropout: f64,
    pub model: UNetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults are consistent")
    }
}

impl RawConfig {
    pub fn resolve(self) -> Result<RunConfig, ConfigError> {
        let base = match self.variant {
            None => Toggles::default(),
            Some(r) => variant_row(r).ok_or_else(|| ConfigError::MalformedConfig(format!("variant {r} is not a row 1-8")))?,
        };
        let pick = |name: &str, explicit: Option<bool>, from_row: bool| -> Result<bool, ConfigError> {
            match (explicit, self.variant) {
                (Some(v), Some(r)) if v != from_row => Err(ConflictingToggles(format!("{name} = {v} contradicts variant row {r}"))),
                (Some(v), _) => Ok(v),
                (None, _) => Ok(from_row),
            }
        };
        use ConfigError::ConflictingToggles;
        let layout = match (self.layout, self.variant) {
            (Some(l), Some(r)) if l != base.layout => {
                return Err(ConflictingToggles(format!("layout {l:?} contradicts variant row {r}")));
            }
            (Some(l), _) => l,
            (None, _) => base.layout,
        };
        let toggles = Toggles {
            layout,
            adaptive_alpha: pick("adaptive_alpha", self.adaptive_alpha, base.adaptive_alpha)?,
            sa: pick("sa", self.sa, base.sa)?,
            lfp: pick("lfp", self.lfp, base.lfp)?,
        };
        let lambda_sa = self.lambda_sa.unwrap_or(DEFAULT_LAMBDA);
        let lambda_lfp = self.lambda_lfp.unwrap_or(DEFAULT_LAMBDA);
        if toggles.sa && lambda_sa == 0.0 {
            return Err(ConflictingToggles("sa is enabled but lambda_sa is 0".into()));
        }
        if toggles.lfp && lambda_lfp == 0.0 {
            return Err(ConflictingToggles("lfp is enabled but lambda_lfp is 0".into()));
        }
        let cfg = RunConfig {
            variant: self.variant,
            dataset: self.dataset,
            lf_dataset: self.lf_dataset,
            checkpoint: self.checkpoint,
            out: self.out,
            seed: self.seed.unwrap_or(0),
            lambda_sa,
            lambda_lfp,
            fusion_domain: self.fusion_domain.unwrap_or_default(),
            guidance: self.guidance.unwrap_or(DEFAULT_GUIDANCE),
            steps: self.steps.unwrap_or(DEFAULT_SAMPLE_STEPS),
            clip_x0: self.clip_x0.unwrap_or(false),
            toggles,
            train_steps: self.train_steps.unwrap_or(TrainConfig::default().steps),
            batch_size: self.batch_size.unwrap_or(16),
            lf_batch_size: self.lf_batch_size.unwrap_or(16),
            lr: self.lr.unwrap_or(1e-4),
            caption_dropout: self.caption_dropout.unwrap_or(CAPTION_DROPOUT),
            model: self.model.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::MalformedConfig(m));
        if !(self.lambda_sa >= 0.0 && self.lambda_lfp >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.guidance >= 0.0) {
            return bad(format!("guidance {} must be non-negative", self.guidance));
        }
        if self.steps == 0 {
            return bad("sampling steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return bad(format!("caption_dropout {} outside [0, 1]", self.caption_dropout));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr must be positive and batch_size at least 1".into());
        }
        self.model.validate().map_err(|e| ConfigError::MalformedConfig(e.to_string()))
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        if self.toggles.adaptive_alpha {
            AlphaMode::Adaptive
        } else {
            AlphaMode::Fixed(FIXED_ALPHA)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            unet: self.model.clone(),
            layout: self.toggles.layout,
            alpha: self.alpha_mode(),
            fusion_domain: self.fusion_domain,
            classes: class_names(),
        }
    }

    /// Loss weights with disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::new(if self.toggles.sa { self.lambda_sa } else { 0.0 }, if self.toggles.lfp { self.lambda_lfp } else { 0.0 })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lf_batch_size: self.lf_batch_size,
            lr: self.lr,
            weights: self.loss_weights(),
            caption_dropout: self.caption_dropout,
            seed: self.seed,
        }
    }
}

/// Fully explicit file form; resolving it gives back the same config.
impl From<&RunConfig> for RawConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            variant: c.variant,
            dataset: c.dataset.clone(),
            lf_dataset: c.lf_dataset.clone(),
            checkpoint: c.checkpoint.clone(),
            out: c.out.clone(),
            seed: Some(c.seed),
            lambda_sa: Some(c.lambda_sa),
            lambda_lfp: Some(c.lambda_lfp),
            fusion_domain: Some(c.fusion_domain),
            guidance: Some(c.guidance),
            steps: Some(c.steps),
            clip_x0: Some(c.clip_x0),
            layout: Some(c.toggles.layout),
            adaptive_alpha: Some(c.toggles.adaptive_alpha),
            sa: Some(c.toggles.sa),
            lfp: Some(c.toggles.lfp),
            train_steps: Some(c.train_steps),
            batch_size: Some(c.batch_size),
            lf_batch_size: Some(c.lf_batch_size),
            lr: Some(c.lr),
            caption_dropout: Some(c.caption_dropout),
            model: Some(c.model.clone()),
        }
    }
}

impl RawConfig {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: RawConfig) -> RawConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RawConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            variant,
            dataset,
            lf_dataset,
            checkpoint,
            out,
            seed,
            lambda_sa,
            lambda_lfp,
            fusion_domain,
            guidance,
            steps,
            clip_x0,
            layout,
            adaptive_alpha,
            sa,
            lfp,
            train_steps,
            batch_size,
            lf_batch_size,
            lr,
            caption_dropout,
            model
        )
    }
}

pub fn parse_config(json: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = serde_json::from_str(json).map_err(|e| ConfigError::MalformedConfig(e.to_string()))?;
    raw.resolve()
}

pub fn load_raw_config(path: &Path) -> Result<RawConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::MalformedConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::MalformedConfig(format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_raw_config(path)?.resolve()
}

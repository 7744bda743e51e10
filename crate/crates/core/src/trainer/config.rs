use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticConfig;
use crate::losses::LossWeights;
use crate::networks::ModelConfig;
use crate::{Error, Result};

/// Architectural switches of the ablation study. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    /// Second depth decoding in the target view followed by inverse warping
    /// of the features. Off: the view-synthesis decoder consumes the
    /// forward-warped features directly.
    pub inverse_warping: bool,
    pub nvs_skips: bool,
    pub depth_skips: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            inverse_warping: true,
            nvs_skips: true,
            depth_skips: true,
        }
    }
}

/// The ablated configurations I..VIII.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Full,
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
}

impl Variant {
    pub const ABLATIONS: [Variant; 8] = [
        Variant::I,
        Variant::II,
        Variant::III,
        Variant::IV,
        Variant::V,
        Variant::VI,
        Variant::VII,
        Variant::VIII,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "full pipeline",
            Variant::I => "no inverse warping",
            Variant::II => "NVS decoder without skips",
            Variant::III => "depth decoder without skips",
            Variant::IV => "without L_recon",
            Variant::V => "without L_VGG",
            Variant::VI => "without L_photo",
            Variant::VII => "without L_smooth",
            Variant::VIII => "without L_consistency",
        }
    }

    /// `config` with this variant's switch or loss weight turned off.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::I => c.ablation.inverse_warping = false,
            Variant::II => c.ablation.nvs_skips = false,
            Variant::III => c.ablation.depth_skips = false,
            Variant::IV => c.loss.alpha = 0.0,
            Variant::V => c.loss.gamma = 0.0,
            Variant::VI => c.loss.beta = 0.0,
            Variant::VII => c.loss.delta = 0.0,
            Variant::VIII => c.loss.omega = 0.0,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
            Variant::IV => "IV",
            Variant::V => "V",
            Variant::VI => "VI",
            Variant::VII => "VII",
            Variant::VIII => "VIII",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = std::iter::once(Variant::Full).chain(Variant::ABLATIONS);
        for v in all {
            if v.to_string().eq_ignore_ascii_case(s) {
                return Ok(v);
            }
        }
        Err(Error::Config(format!(
            "unknown variant `{s}`; valid ids: full, I, II, III, IV, V, VI, VII, VIII"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 (1 - step / steps)`, reaching zero at the last step.
    Linear,
    Constant,
}

/// Everything a training run needs. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Steps between validation passes; `0` validates at checkpoints only.
    pub validate_every: u64,
    pub log_every: u64,
    /// Fraction of pairs held out for validation.
    pub validation_fraction: f64,
    pub bn_momentum: f64,
    /// Re-estimate batch-norm statistics over the training pairs before
    /// every evaluation.
    pub recalibrate_bn: bool,
    /// Let the consistency loss train the target-image encoding branch too.
    pub skip_target_grad: bool,
    /// VGG-16 weights for the perceptual loss.
    pub perceptual_weights: Option<PathBuf>,
    pub loss: LossWeights,
    pub ablation: AblationSwitches,
    pub model: ModelConfig,
    /// Scene distribution when training on generated pairs.
    pub synthetic: SyntheticConfig,
    pub synthetic_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 8,
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::Linear,
            seed: 0,
            checkpoint_every: 1000,
            validate_every: 0,
            log_every: 1,
            validation_fraction: 0.1,
            bn_momentum: 0.1,
            recalibrate_bn: true,
            skip_target_grad: true,
            perceptual_weights: None,
            loss: LossWeights::default(),
            ablation: AblationSwitches::default(),
            model: ModelConfig::default(),
            synthetic: SyntheticConfig::default(),
            synthetic_pairs: 10,
        }
    }
}

impl TrainConfig {
    /// Model configuration with the architectural ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            nvs_skips: self.model.nvs_skips && self.ablation.nvs_skips,
            depth_skips: self.model.depth_skips && self.ablation.depth_skips,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err("validation_fraction must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("bn_momentum must lie in [0, 1]".into());
        }
        self.loss.validate()?;
        self.effective_model().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Linear => viewsynth_tensor::LinearDecay {
                initial: self.lr,
                total_steps: self.steps,
            }
            .lr_at(step),
            LrSchedule::Constant => self.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.steps, c.batch_size, c.lr), (100_000, 8, 6e-5));
        c.validate().unwrap();
        assert!(TrainConfig {
            lr: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            steps: 12,
            perceptual_weights: Some("vgg.safetensors".into()),
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("stepz = 3").is_err());
    }

    #[test]
    fn linear_decay() {
        let c = TrainConfig {
            steps: 100,
            lr: 1e-3,
            ..Default::default()
        };
        for k in [0, 10, 50, 99, 100] {
            assert!((c.lr_at(k) - 1e-3 * (1.0 - k as f64 / 100.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn variants() {
        let base = TrainConfig::default();
        let iv = Variant::IV.apply(&base);
        assert_eq!(iv.loss.alpha, 0.0);
        assert_eq!(
            LossWeights {
                alpha: base.loss.alpha,
                ..iv.loss
            },
            base.loss
        );
        assert!(!Variant::II.apply(&base).effective_model().nvs_skips);
        assert!(!Variant::I.apply(&base).ablation.inverse_warping);
        assert_eq!("viii".parse::<Variant>().unwrap(), Variant::VIII);
        let e = "IX".parse::<Variant>().unwrap_err().to_string();
        assert!(e.contains("VIII"), "{e}");
    }
}

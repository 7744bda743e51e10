use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyper-parameters. Stored inside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Length of the flat embedding; reshaped to `embedding_width / 3`
    /// points.
    pub embedding_width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Stem and the four residual stages.
    pub encoder_widths: [usize; 5],
    /// Decoder widths at output scales 1, 1/2, 1/4, 1/8, 1/16.
    pub decoder_widths: [usize; 5],
    /// Append a validity-mask channel to every skip input.
    pub mask_channel: bool,
    /// Skip connections into the depth decoder.
    pub depth_skips: bool,
    /// Skip connections into the view-synthesis decoder.
    pub nvs_skips: bool,
    /// Initialize the encoder from `encoder_weights`.
    pub pretrained_encoder: bool,
    pub encoder_weights: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            embedding_width: 1536,
            d_min: 0.1,
            d_max: 100.0,
            encoder_widths: [64, 64, 128, 256, 512],
            decoder_widths: [16, 32, 64, 128, 256],
            mask_channel: true,
            depth_skips: true,
            nvs_skips: true,
            pretrained_encoder: false,
            encoder_weights: None,
        }
    }
}

impl ModelConfig {
    /// A narrow network for small images, used by tests and CPU benchmarks.
    pub fn small(height: usize, width: usize) -> Self {
        Self {
            image_height: height,
            image_width: width,
            embedding_width: 192,
            d_min: 0.5,
            d_max: 10.0,
            encoder_widths: [16, 16, 32, 64, 128],
            decoder_widths: [8, 16, 16, 32, 64],
            ..Self::default()
        }
    }

    pub fn num_points(&self) -> usize {
        self.embedding_width / 3
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.embedding_width == 0 || self.embedding_width % 3 != 0 {
            return err(format!(
                "embedding_width {} is not a positive multiple of 3",
                self.embedding_width
            ));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return err(format!(
                "need 0 < d_min < d_max, got {} / {}",
                self.d_min, self.d_max
            ));
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % 32 != 0
            || self.image_width % 32 != 0
        {
            return err(format!(
                "image size {}x{} must be a positive multiple of 32",
                self.image_height, self.image_width
            ));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return err("channel widths must be positive".into());
        }
        if self.pretrained_encoder && self.encoder_weights.is_none() {
            return err("pretrained_encoder is set but encoder_weights is missing".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::small(64, 64).validate().is_ok());
        let bad = [
            ModelConfig {
                embedding_width: 100,
                ..Default::default()
            },
            ModelConfig {
                d_min: 0.0,
                ..Default::default()
            },
            ModelConfig {
                d_min: 5.0,
                d_max: 5.0,
                ..Default::default()
            },
            ModelConfig {
                image_height: 255,
                ..Default::default()
            },
            ModelConfig {
                pretrained_encoder: true,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::small(64, 96);
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::BlockType;
use crate::numerics::LionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CWFAConfig {
    /// Number of flow levels `n`; the volume depth must be divisible by `2^n`.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub conv_channels: usize,
    /// Weight of the spatial (reconstruction) loss next to the NLL.
    pub alpha: f64,
    /// Gaussian parameter prior strength, applied as Lion's decoupled weight
    /// decay (it replaces `lion.weight_decay`).
    pub rho: f64,
    /// Latent standard deviation used when sampling; 0 gives the mode.
    pub temperature: f64,
    pub block_type: BlockType,
    pub clamp: f32,
    /// Total training epochs, spent in chunks of `epochs_per_level` on each
    /// stage in turn: low-resolution net, then flow levels coarse to fine.
    pub epochs: usize,
    pub epochs_per_level: usize,
    pub lion: LionConfig,
    pub seed: u64,
    /// Clamp reconstructions to be nonnegative and zero outside the prior's
    /// support.
    pub project_to_prior: bool,
    /// Side of the box filter used for the relative-brightness map.
    pub ratio_box: usize,
    /// Regularizer of the relative-brightness denominator, as a fraction of
    /// its maximum.
    pub ratio_floor: f32,
}

impl Default for CWFAConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            blocks_per_level: 6,
            conv_channels: 14,
            alpha: 0.48,
            rho: 1e-5,
            temperature: 0.0,
            block_type: BlockType::Affine,
            clamp: crate::flow::DEFAULT_CLAMP,
            epochs: 160,
            epochs_per_level: 40,
            lion: LionConfig {
                learning_rate: 5e-4,
                ..LionConfig::default()
            },
            seed: 0,
            project_to_prior: true,
            ratio_box: 5,
            ratio_floor: 0.001,
        }
    }
}

impl CWFAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.blocks_per_level == 0 || self.conv_channels == 0 {
            return Err(Error::invalid("levels, blocks_per_level and conv_channels must be positive"));
        }
        if [self.alpha, self.rho, self.temperature].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::invalid("alpha, rho and temperature must be >= 0"));
        }
        if self.epochs_per_level == 0 {
            return Err(Error::invalid("epochs_per_level must be positive"));
        }
        if self.ratio_box.is_multiple_of(2) {
            return Err(Error::invalid("ratio_box must be odd"));
        }
        self.optimizer().validate()
    }

    /// Lion settings with `rho` as the weight decay.
    pub fn optimizer(&self) -> LionConfig {
        LionConfig {
            weight_decay: self.rho as f32,
            ..self.lion
        }
    }

    pub fn check_volume(&self, shape: &[usize]) -> Result<()> {
        let div = 1usize << self.levels;
        match shape {
            [d, _, _] if d % div == 0 => Ok(()),
            _ => Err(Error::shape(format!(
                "volume {shape:?} must be [D, H, W] with D divisible by 2^{} = {div}",
                self.levels
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = CWFAConfig::default();
        c.validate().unwrap();
        assert_eq!(c.alpha, 0.48);
        assert_eq!(c.conv_channels, 14);
        assert_eq!(c.temperature, 0.0);
    }

    #[test]
    fn depth_divisibility() {
        let c = CWFAConfig::default();
        assert!(c.check_volume(&[16, 4, 4]).is_ok());
        assert!(c.check_volume(&[12, 4, 4]).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_negative_alpha() {
        assert!(serde_json::from_str::<CWFAConfig>(r#"{"levels": 3, "bogus": 1}"#).is_err());
        let c = CWFAConfig {
            alpha: -1.0,
            ..CWFAConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{HvaeError, Result};

/// Prior parameterisation of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Mean-field posteriors, `N(0, I)` priors at every group.
    Vae,
    /// Residual posteriors relative to learned top-down priors.
    Nvae,
    /// NVAE with a VamPrior on the top group.
    Nvmp,
    /// NVMP plus a prior-to-VamPrior KL at every lower group.
    NvmpPlus,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vae, Variant::Nvae, Variant::Nvmp, Variant::NvmpPlus];

    pub fn is_residual(self) -> bool {
        !matches!(self, Variant::Vae)
    }

    pub fn uses_vamprior(self) -> bool {
        matches!(self, Variant::Nvmp | Variant::NvmpPlus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::Nvae => "nvae",
            Variant::Nvmp => "nvmp",
            Variant::NvmpPlus => "nvmp+",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = HvaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vae" => Ok(Variant::Vae),
            "nvae" => Ok(Variant::Nvae),
            "nvmp" => Ok(Variant::Nvmp),
            "nvmp+" | "nvmp_plus" | "nvmpplus" => Ok(Variant::NvmpPlus),
            other => Err(HvaeError::Config(format!(
                "unknown variant '{other}' (expected vae|nvae|nvmp|nvmp+)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionConfig {
    pub enabled: bool,
    /// Index of the supervised group `z_P`.
    pub target_layer: usize,
    pub loss_weight: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            enabled: false,
            target_layer: 2,
            loss_weight: 1.0,
        }
    }
}

/// Architecture hyperparameters. Everything that changes the parameter
/// layout lives here.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `L`; the hierarchy has `L + 1` groups.
    pub levels: usize,
    /// Square image side length; must be divisible by `2^L`.
    pub resolution: usize,
    pub latent_channels: usize,
    /// Feature channels at full resolution; doubles per scale up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    /// VamPrior component count.
    pub components: usize,
    pub seg_channels: usize,
    pub supervision: SupervisionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Nvae,
            levels: 4,
            resolution: 64,
            latent_channels: 2,
            base_channels: 8,
            max_channels: 32,
            components: 16,
            seg_channels: 8,
            supervision: SupervisionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HvaeError::Config(m));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.levels > 16 || self.resolution % (1 << self.levels) != 0 || self.resolution == 0 {
            return bad(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.levels
            ));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad("channel counts must be positive with max_channels >= base_channels".into());
        }
        if self.variant.uses_vamprior() && self.components == 0 {
            return bad("VamPrior variants need at least one component".into());
        }
        if self.supervision.enabled {
            if self.supervision.target_layer > self.levels {
                return bad(format!(
                    "supervised layer {} outside 0..={}",
                    self.supervision.target_layer, self.levels
                ));
            }
            if self.seg_channels == 0 {
                return bad("seg_channels must be >= 1".into());
            }
        }
        if !(self.supervision.loss_weight >= 0.0 && self.supervision.loss_weight.is_finite()) {
            return bad("supervision weight must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Feature channels at scale `s` (0 = full resolution).
    pub fn channels(&self, s: usize) -> usize {
        (self.base_channels << s.min(16)).min(self.max_channels)
    }

    /// Spatial side length of group `layer`.
    pub fn latent_resolution(&self, layer: usize) -> usize {
        self.resolution >> (self.levels - layer)
    }

    /// Number of scalars in group `layer` for one image.
    pub fn latent_size(&self, layer: usize) -> usize {
        let r = self.latent_resolution(layer);
        r * r * self.latent_channels
    }
}

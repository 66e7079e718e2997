//! Model and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Omega1,
    Omega2,
    Omega3,
    Omega4,
    Omega5,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Omega1, Variant::Omega2, Variant::Omega3, Variant::Omega4, Variant::Omega5, Variant::Full];

    /// Long-short interpolation only in the final model; the ablation rows
    /// use short-term interpolation.
    pub fn long_short_interpolation(self) -> bool {
        matches!(self, Variant::Omega5 | Variant::Full)
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Variant::Omega1 => Aggregation::None,
            Variant::Omega2 => Aggregation::FixedWindow { k: 1, t: 1 },
            Variant::Omega3 => Aggregation::FixedWindow { k: 3, t: 2 },
            Variant::Omega4 | Variant::Omega5 | Variant::Full => Aggregation::Deformable,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega1" => Ok(Variant::Omega1),
            "omega2" => Ok(Variant::Omega2),
            "omega3" => Ok(Variant::Omega3),
            "omega4" => Ok(Variant::Omega4),
            "omega5" => Ok(Variant::Omega5),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant '{}'", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    None,
    /// Cross-frame attention in a fixed window: offsets forced to zero.
    FixedWindow { k: usize, t: usize },
    Deformable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// RSTB count in feature extraction / reconstruction.
    pub m_f: usize,
    pub m_b: usize,
    pub stbs_per_rstb: usize,
    pub channels: usize,
    pub embed_channels: usize,
    /// Deformable kernel size and top-T selection count in STDFA.
    pub kernel_size: usize,
    pub top_t: usize,
    pub scale: usize,
    pub window_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub precision: Precision,
    pub seed: u64,
    /// Scale Q.K relevance scores by 1/sqrt(c_e). Off: exactly as written.
    pub qk_scale: bool,
    /// DCNv2-style modulation mask on deformable convolutions.
    pub modulation_mask: bool,
    /// Reserved extension; enabling it is rejected.
    pub relative_position_bias: bool,
    /// Deformable alignment pyramid levels; 1 = single level.
    pub pyramid_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m_f: 2,
            m_b: 6,
            stbs_per_rstb: 6,
            channels: 64,
            embed_channels: 72,
            kernel_size: 3,
            top_t: 2,
            scale: 4,
            window_size: 4,
            heads: 4,
            mlp_ratio: 2,
            variant: Variant::Full,
            precision: Precision::F64,
            seed: 0,
            qk_scale: false,
            modulation_mask: false,
            relative_position_bias: false,
            pyramid_levels: 1,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient checks and the overfit test.
    pub fn micro() -> Self {
        ModelConfig {
            m_f: 1,
            m_b: 1,
            stbs_per_rstb: 1,
            channels: 8,
            embed_channels: 8,
            heads: 2,
            ..Default::default()
        }
    }

    /// Effective STDFA kernel size / T for the configured variant.
    pub fn agg_kernel(&self) -> (usize, usize) {
        match self.variant.aggregation() {
            Aggregation::FixedWindow { k, t } => (k, t),
            _ => (self.kernel_size, self.top_t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.scale != 4 {
            return Err(Error::Config("only scale 4 is supported (two x2 pixel-shuffle stages)".into()));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd and positive".into()));
        }
        let (k, t) = self.agg_kernel();
        if t == 0 || t > k * k {
            return Err(Error::Config(format!("top_t ({}) must be in 1..={}", t, k * k)));
        }
        if self.relative_position_bias {
            return Err(Error::Config(
                "relative_position_bias is a reserved extension and cannot be enabled".into(),
            ));
        }
        if self.pyramid_levels != 1 {
            return Err(Error::Config("only pyramid_levels = 1 is implemented".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// CLI/run configuration: the model plus paths, seeds, and training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// LR-space crop edge used for training samples.
    pub crop_size: usize,
    /// Random flip / quarter-turn augmentation of each sample.
    pub augment: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            steps: 200,
            lr_max: 2e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            crop_size: 32,
            augment: true,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("config parse: {}", e)))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = Variant::Omega3;
        cfg.model.seed = 42;
        cfg.steps = 17;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = r#"{"steps": 3, "bogus_key": 1}"#;
        assert!(RunConfig::from_json(s).is_err());
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.m_f, 2);
        assert_eq!(cfg.model.m_b, 6);
        assert_eq!(cfg.model.stbs_per_rstb, 6);
        assert_eq!(cfg.model.channels, 64);
        assert_eq!(cfg.model.embed_channels, 72);
        assert_eq!(cfg.model.kernel_size, 3);
        assert_eq!(cfg.model.top_t, 2);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.lr_max, 2e-4);
        assert_eq!(cfg.lr_min, 1e-7);
    }

    #[test]
    fn variant_table_structure() {
        assert!(!Variant::Omega1.long_short_interpolation());
        assert!(Variant::Omega5.long_short_interpolation());
        assert_eq!(Variant::Omega1.aggregation(), Aggregation::None);
        assert_eq!(Variant::Omega2.aggregation(), Aggregation::FixedWindow { k: 1, t: 1 });
        assert_eq!(Variant::Omega3.aggregation(), Aggregation::FixedWindow { k: 3, t: 2 });
        assert_eq!(Variant::Omega4.aggregation(), Aggregation::Deformable);
    }

    #[test]
    fn rejects_reserved_extension() {
        let mut cfg = ModelConfig::default();
        cfg.relative_position_bias = true;
        assert!(cfg.validate().is_err());
    }
}

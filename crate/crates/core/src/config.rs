//! Single TOML run configuration. Every hyperparameter lives here; CLI flags
//! only override individual values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub image_size: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { image_size: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Backbone feature channels.
    pub channels: usize,
    /// Stride-2 then stride-1 conv blocks; 2..=4.
    pub backbone_blocks: usize,
    pub attention_kernel: usize,
    pub sigmoid_gate: bool,
    pub spatial_residual: bool,
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    /// Hop distance bands in the skeleton adjacency family (1..=4).
    pub hops: usize,
    /// Use within-distance-k supports instead of exact-distance-k.
    pub hops_within: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: 32,
            backbone_blocks: 4,
            attention_kernel: 1,
            sigmoid_gate: false,
            spatial_residual: true,
            gcn_hidden: 64,
            gcn_layers: 3,
            hops: 3,
            hops_within: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub crop_width: usize,
    pub crop_height: usize,
    pub heatmap_sigma: f64,
    /// Weight of the pose (refinement) loss term.
    pub lambda_pose: f64,
    pub use_augment: bool,
    pub use_adam: bool,
    pub use_gcn: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            crop_width: 36,
            crop_height: 48,
            heatmap_sigma: 2.0,
            lambda_pose: 1.0,
            use_augment: true,
            use_adam: true,
            use_gcn: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Epochs per grid run; falls back to `train.epochs` when absent.
    pub epochs: Option<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![1, 2, 3],
            epochs: Some(10),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.crop_height * 3 != t.crop_width * 4 {
            return Err(ConfigError::Invalid(format!(
                "crop {}x{} does not have the required 4:3 height:width ratio",
                t.crop_width, t.crop_height
            )));
        }
        if t.crop_width % 4 != 0 || t.crop_height % 4 != 0 {
            return Err(ConfigError::Invalid(format!(
                "crop {}x{} must be divisible by the heatmap stride 4",
                t.crop_width, t.crop_height
            )));
        }
        if t.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "learning_rate {} must be positive and finite",
                t.learning_rate
            )));
        }
        if !(t.heatmap_sigma > 0.0) {
            return Err(ConfigError::Invalid("heatmap_sigma must be positive".into()));
        }
        if t.lambda_pose < 0.0 || !t.lambda_pose.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "lambda_pose {} must be nonnegative",
                t.lambda_pose
            )));
        }
        let m = &self.model;
        if !(1..=4).contains(&m.hops) {
            return Err(ConfigError::Invalid(format!(
                "hops {} outside 1..=4",
                m.hops
            )));
        }
        if !(2..=4).contains(&m.backbone_blocks) {
            return Err(ConfigError::Invalid(format!(
                "backbone_blocks {} outside 2..=4",
                m.backbone_blocks
            )));
        }
        if m.channels == 0 || m.gcn_hidden == 0 || m.gcn_layers == 0 {
            return Err(ConfigError::Invalid(
                "channels, gcn_hidden and gcn_layers must be positive".into(),
            ));
        }
        if m.attention_kernel % 2 == 0 {
            return Err(ConfigError::Invalid(format!(
                "attention_kernel {} must be odd",
                m.attention_kernel
            )));
        }
        if self.ablate.seeds.is_empty() {
            return Err(ConfigError::Invalid("ablate.seeds must not be empty".into()));
        }
        self.augment
            .validate()
            .map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_aspect_ratio_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.crop_width = 40;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_probability_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.augment.mask_prob = 1.5;
        assert!(cfg.validate().is_err());
    }
}

//! Engine configuration, stored as a single JSON object. Missing keys take
//! their defaults; unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Similarity between a head's output summand and the layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMetric {
    #[default]
    Dot,
    /// Magnitude of the head summand.
    L2,
    Cosine,
}

/// Similarity between a self-attention map and the pseudo self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMetric {
    #[default]
    Dot,
    /// Inverse mean squared difference.
    Mse,
    /// Continuous IoU `Σ min / Σ max`.
    Iou,
}

/// How heads and layers are weighted when building the global map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Weights derived from activations.
    #[default]
    Auto,
    /// Plain mean over heads and layers (reference mode).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetResolution {
    /// Largest height and width over the cross layers.
    #[default]
    Max,
    Fixed { height: usize, width: usize },
}

macro_rules! str_enum {
    ($ty:ty, $($name:literal => $variant:path),+) => {
        impl FromStr for $ty {
            type Err = ConfigError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(ConfigError::Invalid(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $($variant => $name,)+ };
                f.write_str(name)
            }
        }
    };
}

str_enum!(HeadMetric, "dot" => HeadMetric::Dot, "l2" => HeadMetric::L2, "cosine" => HeadMetric::Cosine);
str_enum!(LayerMetric, "dot" => LayerMetric::Dot, "mse" => LayerMetric::Mse, "iou" => LayerMetric::Iou);
str_enum!(AggregationMode, "auto" => AggregationMode::Auto, "uniform" => AggregationMode::Uniform);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub aggregation: AggregationMode,
    pub head_metric: HeadMetric,
    pub layer_metric: LayerMetric,
    /// Per-pixel rescaling over content classes; disabled only for the
    /// uniform reference pipeline.
    pub per_pixel_rescale: bool,
    pub refinement_steps: u32,
    pub bg_threshold: f64,
    pub target_resolution: TargetResolution,
    pub epsilon: f64,
    /// For each cross layer, the index of the self layer whose weight it
    /// inherits. `None` pairs by position.
    pub layer_pairing: Option<Vec<usize>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            aggregation: AggregationMode::Auto,
            head_metric: HeadMetric::Dot,
            layer_metric: LayerMetric::Dot,
            per_pixel_rescale: true,
            refinement_steps: 1,
            bg_threshold: 0.5,
            target_resolution: TargetResolution::Max,
            epsilon: 1e-8,
            layer_pairing: None,
        }
    }
}

impl EngineConfig {
    /// Uniform head/layer averaging without per-pixel rescaling.
    pub fn uniform_reference() -> Self {
        Self { aggregation: AggregationMode::Uniform, per_pixel_rescale: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return Err(ConfigError::Invalid(format!("bg_threshold {} outside [0, 1]", self.bg_threshold)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ConfigError::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let TargetResolution::Fixed { height, width } = self.target_resolution {
            if height == 0 || width == 0 {
                return Err(ConfigError::Invalid("fixed target resolution must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

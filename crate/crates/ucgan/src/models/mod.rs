//! Network builders for the four players: encoder E, generator G,
//! discriminator D and attribute classifier A.
//!
//! Every architecture is assembled from the smooth operator set only:
//! stride-1 3x3 convolutions, 2x2 average pooling, nearest-neighbor
//! upsampling and ELU. Downsampling that would introduce checkerboard
//! gradient artifacts (max-pool, strided conv, transposed conv) is absent by
//! construction, and [`Network::assert_smooth_ops`] re-checks the layer list
//! of every built network against the operator catalog.

mod builders;
mod network;

pub use builders::{
    build_attribute_classifier, build_discriminator, build_encoder, build_generator,
    build_vector_discriminator, build_vector_encoder, build_vector_generator,
};
pub use network::{ForwardOpts, Layer, Network, RunningUpdate, TapeBinding};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default dropout rate on the classifier's two hidden dense layers.
pub const DROPOUT_RATE: f64 = 0.5;
/// Epsilon inside the per-channel normalization denominator.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics blend: `r <- momentum * r + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("resolution must be a power of two >= 8, got {0}")]
    BadResolution(usize),
    #[error("latent pair count must be >= 1, got {0}")]
    BadLatentDim(usize),
    #[error("channel plan invalid: base {base}, cap {cap}")]
    BadChannels { base: usize, cap: usize },
    #[error("attribute {0:?} has zero classes")]
    EmptyAttribute(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// How one conditioning attribute is encoded and classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributeKind {
    /// Plain one-hot over `classes` values.
    Categorical { classes: usize },
    /// Continuous value carried as a normalized scalar plus a one-hot over
    /// `bins` quantization bins (used for age).
    QuantizedContinuous { bins: usize },
}

impl AttributeKind {
    /// Width of this attribute inside the conditioning vector.
    pub fn width(&self) -> usize {
        match self {
            AttributeKind::Categorical { classes } => *classes,
            AttributeKind::QuantizedContinuous { bins } => bins + 1,
        }
    }

    /// Logit count of the classifier head for this attribute.
    pub fn head_width(&self) -> usize {
        match self {
            AttributeKind::Categorical { classes } => *classes,
            AttributeKind::QuantizedContinuous { bins } => *bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

impl AttributeDef {
    pub fn categorical(name: &str, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Categorical { classes },
        }
    }

    pub fn quantized(name: &str, bins: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::QuantizedContinuous { bins },
        }
    }
}

/// Shared sizing for all four networks.
///
/// `d` counts latent PAIRS; the encoder emits `2 * d` values that the
/// pairwise normalizer maps onto `d` unit circles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub d: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub attributes: Vec<AttributeDef>,
}

impl ModelConfig {
    /// Desk-scale preset: 32x32 images, 16 latent pairs, thin channels.
    pub fn desk() -> Self {
        Self {
            resolution: 32,
            d: 16,
            base_channels: 16,
            channel_cap: 128,
            attributes: vec![
                AttributeDef::quantized("age", 10),
                AttributeDef::categorical("gender", 2),
                AttributeDef::categorical("ethnicity", 5),
            ],
        }
    }

    /// Full-scale preset matching the reference 128x128 face setup.
    pub fn full_scale() -> Self {
        Self {
            resolution: 128,
            d: 50,
            base_channels: 64,
            channel_cap: 1024,
            attributes: vec![
                AttributeDef::quantized("age", 10),
                AttributeDef::categorical("gender", 2),
                AttributeDef::categorical("ethnicity", 5),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(ModelError::BadResolution(self.resolution));
        }
        if self.d == 0 {
            return Err(ModelError::BadLatentDim(self.d));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(ModelError::BadChannels {
                base: self.base_channels,
                cap: self.channel_cap,
            });
        }
        for a in &self.attributes {
            if a.kind.head_width() == 0 {
                return Err(ModelError::EmptyAttribute(a.name.clone()));
            }
        }
        Ok(())
    }

    /// Downsampling block count; every block halves the spatial side once,
    /// ending at 4x4.
    pub fn blocks(&self) -> usize {
        (self.resolution.trailing_zeros() as usize) - 2
    }

    /// Width of the concatenated conditioning vector.
    pub fn attr_width(&self) -> usize {
        self.attributes.iter().map(|a| a.kind.width()).sum()
    }

    /// Encoder output width (before pairing): two values per latent pair.
    pub fn latent_width(&self) -> usize {
        2 * self.d
    }

    /// Channels of block `b` under the doubling-with-cap plan.
    pub fn block_channels(&self, b: usize) -> usize {
        (self.base_channels << b).min(self.channel_cap)
    }

    /// Channels at the 4x4 top of the encoder pyramid.
    pub fn top_channels(&self) -> usize {
        self.block_channels(self.blocks() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shapes() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.blocks(), 3);
        assert_eq!(cfg.latent_width(), 32);
        assert_eq!(cfg.attr_width(), 11 + 2 + 5);
        assert_eq!(cfg.top_channels(), 64);
    }

    #[test]
    fn full_scale_config_shapes() {
        let cfg = ModelConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.blocks(), 5);
        assert_eq!(cfg.latent_width(), 100);
        assert_eq!(cfg.top_channels(), 1024);
    }

    #[test]
    fn validation_rejects_bad_resolutions() {
        let mut cfg = ModelConfig::desk();
        cfg.resolution = 24;
        assert!(matches!(cfg.validate(), Err(ModelError::BadResolution(24))));
        cfg.resolution = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attribute_widths() {
        assert_eq!(AttributeKind::Categorical { classes: 5 }.width(), 5);
        assert_eq!(AttributeKind::QuantizedContinuous { bins: 10 }.width(), 11);
        assert_eq!(AttributeKind::QuantizedContinuous { bins: 10 }.head_width(), 10);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ModelConfig::desk();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}

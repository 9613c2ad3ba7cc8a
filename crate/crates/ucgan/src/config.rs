//! Run configuration: one JSON document with sections
//! `{model, train, losses, latent, diversity, data}`. Every field has a
//! default, so a config file only needs the values it changes; CLI flags
//! override single fields on top, and the resolved document is echoed into
//! the output directory for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::diversity::{
    BirthdayOpts, EmbeddingKind, EmbeddingSpec, DEFAULT_CONFIDENCE, DEFAULT_N0, DEFAULT_N_CAP,
    DEFAULT_TAU_PERCENTILE, DEFAULT_TOP_K, DEFAULT_TRIALS_PER_N,
};
use crate::latent::LatentSpaceKind;
use crate::losses::{DEFAULT_GAMMA_B, DEFAULT_KEEP_RATIO, DEFAULT_LAMBDA_K, DEFAULT_MIXER_RHO};
use crate::models::{AttributeDef, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad config {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainSection,
    pub losses: LossSection,
    pub latent: LatentSection,
    pub diversity: DiversitySection,
    pub data: DataSection,
}

/// Architecture sizing. Resolution and conditioning attributes are not
/// stated here; they come from the dataset the run is pointed at, which
/// keeps the two from disagreeing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Dense width of the vector-mode networks.
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_cap: 128,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch: usize,
    pub total_steps: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch: 32,
            total_steps: 1000,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub entropy_weight: f64,
    pub recon_weight: f64,
    pub latent_gen_weight: f64,
    pub latent_recon_weight: f64,
    pub attr_weight: f64,
    pub contractive_weight: f64,
    pub focal_gamma: f64,
    pub locality_beta: f64,
    pub keep_ratio: f64,
    pub mixer_rho: f64,
    pub lambda_k: f64,
    pub gamma_b: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            entropy_weight: 1.0,
            recon_weight: 1.0,
            latent_gen_weight: 1.0,
            latent_recon_weight: 1.0,
            attr_weight: 1.0,
            contractive_weight: 1.0,
            focal_gamma: 2.0,
            locality_beta: 1.0,
            keep_ratio: DEFAULT_KEEP_RATIO,
            mixer_rho: DEFAULT_MIXER_RHO,
            lambda_k: DEFAULT_LAMBDA_K,
            gamma_b: DEFAULT_GAMMA_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSection {
    pub kind: LatentSpaceKind,
    /// Latent pair count; the code width is twice this.
    pub d: usize,
    pub hist_bins: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self {
            kind: LatentSpaceKind::UnitComplex,
            d: 16,
            hist_bins: 36,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversitySection {
    pub embedding: EmbeddingKind,
    pub n0: usize,
    pub trials_per_n: usize,
    pub confidence: f64,
    pub top_k: usize,
    pub n_cap: usize,
    /// Explicit duplicate threshold; when absent, τ is calibrated from the
    /// `tau_percentile` of real-sample pairwise distances.
    pub threshold: Option<f64>,
    pub tau_percentile: f64,
}

impl Default for DiversitySection {
    fn default() -> Self {
        Self {
            embedding: EmbeddingKind::RawPixel,
            n0: DEFAULT_N0,
            trials_per_n: DEFAULT_TRIALS_PER_N,
            confidence: DEFAULT_CONFIDENCE,
            top_k: DEFAULT_TOP_K,
            n_cap: DEFAULT_N_CAP,
            threshold: None,
            tau_percentile: DEFAULT_TAU_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Sprites,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteSection {
    pub resolution: usize,
    pub count: usize,
    pub size_bins: usize,
    pub positions: usize,
}

impl Default for SpriteSection {
    fn default() -> Self {
        // 2 shapes x 5 palettes x 10 sizes x 10 positions: support 1000
        Self {
            resolution: 32,
            count: 2000,
            size_bins: 10,
            positions: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingSection {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub count: usize,
}

impl Default for RingSection {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
            count: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub kind: DataKind,
    pub sprites: SpriteSection,
    pub ring: RingSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Sprites,
            sprites: SpriteSection::default(),
            ring: RingSection::default(),
        }
    }
}

/// Single-field overrides carried by CLI flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bins: Option<usize>,
    pub batch: Option<usize>,
    pub threshold: Option<f64>,
    pub n: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Echoes the resolved document as pretty JSON (with trailing newline).
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(bins) = o.bins {
            self.latent.hist_bins = bins;
        }
        if let Some(batch) = o.batch {
            self.train.batch = batch;
        }
        if let Some(tau) = o.threshold {
            self.diversity.threshold = Some(tau);
        }
        if let Some(n) = o.n {
            self.sprites_mut_count(n);
        }
    }

    fn sprites_mut_count(&mut self, n: usize) {
        match self.data.kind {
            DataKind::Sprites => self.data.sprites.count = n,
            DataKind::Ring => self.data.ring.count = n,
        }
    }

    /// Flattens the train/losses/latent sections into the trainer's config.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.train.batch,
            total_steps: self.train.total_steps,
            adam: self.train.adam.clone(),
            mixer_rho: self.losses.mixer_rho,
            lambda_k: self.losses.lambda_k,
            gamma_b: self.losses.gamma_b,
            entropy_weight: self.losses.entropy_weight,
            recon_weight: self.losses.recon_weight,
            latent_gen_weight: self.losses.latent_gen_weight,
            latent_recon_weight: self.losses.latent_recon_weight,
            attr_weight: self.losses.attr_weight,
            contractive_weight: self.losses.contractive_weight,
            focal_gamma: self.losses.focal_gamma,
            locality_beta: self.losses.locality_beta,
            hist_bins: self.latent.hist_bins,
            keep_ratio: self.losses.keep_ratio,
            latent_kind: self.latent.kind,
            checkpoint_every: self.train.checkpoint_every,
            seed: self.train.seed,
        }
    }

    /// Architecture config for a dataset with the given resolution and
    /// attribute layout.
    pub fn model_config(&self, resolution: usize, attributes: Vec<AttributeDef>) -> ModelConfig {
        ModelConfig {
            resolution,
            d: self.latent.d,
            base_channels: self.model.base_channels,
            channel_cap: self.model.channel_cap,
            attributes,
        }
    }

    pub fn birthday_opts(&self) -> BirthdayOpts {
        BirthdayOpts {
            n0: self.diversity.n0,
            trials_per_n: self.diversity.trials_per_n,
            confidence: self.diversity.confidence,
            top_k: self.diversity.top_k,
            n_cap: self.diversity.n_cap,
        }
    }

    pub fn embedding_spec(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            kind: self.diversity.embedding,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = Config::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_document_fills_missing_sections_with_defaults() {
        let cfg: Config = serde_json::from_str(
            r#"{"train":{"batch":8},"data":{"kind":"ring"},"latent":{"kind":"uniform-box","d":4}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.train.total_steps, 1000);
        assert_eq!(cfg.data.kind, DataKind::Ring);
        assert_eq!(cfg.data.ring.modes, 8);
        assert_eq!(cfg.latent.kind, LatentSpaceKind::UniformBox);
        assert_eq!(cfg.latent.d, 4);
        assert_eq!(cfg.losses.keep_ratio, DEFAULT_KEEP_RATIO);
    }

    #[test]
    fn flag_overrides_hit_the_right_fields() {
        let mut cfg = Config::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            bins: Some(72),
            batch: Some(4),
            threshold: Some(0.25),
            n: Some(333),
        });
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.latent.hist_bins, 72);
        assert_eq!(cfg.train.batch, 4);
        assert_eq!(cfg.diversity.threshold, Some(0.25));
        assert_eq!(cfg.data.sprites.count, 333);

        let mut ring = Config {
            data: DataSection {
                kind: DataKind::Ring,
                ..DataSection::default()
            },
            ..Config::default()
        };
        ring.apply(&Overrides {
            n: Some(50),
            ..Overrides::default()
        });
        assert_eq!(ring.data.ring.count, 50);
        assert_eq!(ring.data.sprites.count, 2000);
    }

    #[test]
    fn flattening_preserves_every_trainer_field() {
        let mut cfg = Config::default();
        cfg.train.batch = 6;
        cfg.losses.gamma_b = 0.5;
        cfg.losses.keep_ratio = 0.4;
        cfg.latent.hist_bins = 18;
        cfg.latent.kind = LatentSpaceKind::Gaussian;
        let t = cfg.train_config();
        assert_eq!(t.batch, 6);
        assert_eq!(t.gamma_b, 0.5);
        assert_eq!(t.keep_ratio, 0.4);
        assert_eq!(t.hist_bins, 18);
        assert_eq!(t.latent_kind, LatentSpaceKind::Gaussian);
        t.validate().unwrap();
    }

    #[test]
    fn model_config_takes_dataset_geometry() {
        let cfg = Config::default();
        let m = cfg.model_config(32, vec![AttributeDef::categorical("gender", 2)]);
        assert_eq!(m.resolution, 32);
        assert_eq!(m.d, 16);
        assert_eq!(m.attr_width(), 2);
        m.validate().unwrap();
    }

    #[test]
    fn echo_file_reloads_identically() {
        let dir = std::env::temp_dir().join(format!("ucgan-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        let mut cfg = Config::default();
        cfg.diversity.threshold = Some(0.1);
        cfg.save(&path).unwrap();
        assert_eq!(Config::load(&path).unwrap(), cfg);
        let text = std::fs::read_to_string(&path).unwrap();
        for section in ["model", "train", "losses", "latent", "diversity", "data"] {
            assert!(text.contains(&format!("\"{section}\"")), "missing {section}");
        }
    }
}

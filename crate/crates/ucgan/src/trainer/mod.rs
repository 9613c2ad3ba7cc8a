//! Training orchestration: attribute-classifier pretraining, the
//! simultaneous one-tape GAN step with strict encoder isolation, and the
//! checkpointing metrics loop around it.
//!
//! One step builds a single graph holding every objective, runs one backward
//! pass per objective, and only then writes: parameter updates, running
//! statistics, the equilibrium controller, and the loss-mixer state all
//! apply after the last read, so the three networks see each other's
//! pre-step parameters regardless of update order.

mod attr;
mod gan;
mod run;

pub use attr::{classifier_accuracy, contractive_penalty_on_tape, pretrain_attribute_classifier};
pub use gan::{GanBatch, GanTrainer, Role, StepGraph};
pub use run::{load_gan_checkpoint, train_gan, TrainData};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AutodiffError};
use crate::latent::LatentSpaceKind;
use crate::losses::{
    LossError, DEFAULT_GAMMA_B, DEFAULT_KEEP_RATIO, DEFAULT_LAMBDA_K, DEFAULT_MIXER_RHO,
};
use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("dataset is missing labels for attribute '{0}'")]
    MissingLabels(String),
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl TrainerError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainerError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Everything one run needs beyond the model architecture. The same config
/// drives classifier pretraining (which ignores the GAN-only fields) and GAN
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub total_steps: usize,
    pub adam: AdamConfig,
    /// Smoothing factor of the adaptive loss mixer.
    pub mixer_rho: f64,
    /// Proportional gain of the equilibrium controller.
    pub lambda_k: f64,
    /// Target ratio of generated-to-real reconstruction loss.
    pub gamma_b: f64,
    /// Weight of the angle-histogram entropy term (encoder, real samples).
    pub entropy_weight: f64,
    /// Weight of the image-identity reconstruction term.
    pub recon_weight: f64,
    /// Weight of the latent-identity term on sampled codes.
    pub latent_gen_weight: f64,
    /// Weight of the latent-identity term on re-encoded reconstructions.
    pub latent_recon_weight: f64,
    /// Weight of the attribute-guidance term through the frozen classifier.
    pub attr_weight: f64,
    /// Weight of the stochastic contractive penalty (classifier pretraining).
    pub contractive_weight: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
    /// Temperature of the locality loss and softargmax.
    pub locality_beta: f64,
    /// Node count of the training-time angle histogram.
    pub hist_bins: usize,
    /// Fraction of pixel losses kept by loss max-pooling.
    pub keep_ratio: f64,
    pub latent_kind: LatentSpaceKind,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            total_steps: 1000,
            adam: AdamConfig::default(),
            mixer_rho: DEFAULT_MIXER_RHO,
            lambda_k: DEFAULT_LAMBDA_K,
            gamma_b: DEFAULT_GAMMA_B,
            entropy_weight: 1.0,
            recon_weight: 1.0,
            latent_gen_weight: 1.0,
            latent_recon_weight: 1.0,
            attr_weight: 1.0,
            contractive_weight: 1.0,
            focal_gamma: 2.0,
            locality_beta: 1.0,
            hist_bins: 36,
            keep_ratio: DEFAULT_KEEP_RATIO,
            latent_kind: LatentSpaceKind::UnitComplex,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.batch < 2 {
            return Err(TrainerError::BadConfig(format!(
                "batch must be at least 2, got {}",
                self.batch
            )));
        }
        if self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(TrainerError::BadConfig(
                "total_steps and checkpoint_every must be positive".into(),
            ));
        }
        let weights = [
            ("entropy_weight", self.entropy_weight),
            ("recon_weight", self.recon_weight),
            ("latent_gen_weight", self.latent_gen_weight),
            ("latent_recon_weight", self.latent_recon_weight),
            ("attr_weight", self.attr_weight),
            ("contractive_weight", self.contractive_weight),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(TrainerError::BadConfig(format!(
                    "{name} must be a finite nonnegative number, got {w}"
                )));
            }
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(TrainerError::BadConfig(format!(
                "keep_ratio must be in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        if self.locality_beta <= 0.0 {
            return Err(TrainerError::BadConfig(format!(
                "locality_beta must be positive, got {}",
                self.locality_beta
            )));
        }
        if self.hist_bins < 2 {
            return Err(TrainerError::BadConfig(format!(
                "hist_bins must be at least 2, got {}",
                self.hist_bins
            )));
        }
        if !(self.mixer_rho >= 0.0 && self.mixer_rho < 1.0) {
            return Err(TrainerError::BadConfig(format!(
                "mixer_rho must be in [0, 1), got {}",
                self.mixer_rho
            )));
        }
        if self.lambda_k <= 0.0 || !(0.0..=1.0).contains(&self.gamma_b) {
            return Err(TrainerError::BadConfig(format!(
                "lambda_k {} / gamma_b {} out of range",
                self.lambda_k, self.gamma_b
            )));
        }
        Ok(())
    }
}

/// Per-step record of every objective value plus controller state. The CSV
/// layout is `step,L_real,L_fake,L_D,L_G,eq_terms...,k_t,M_t,gammas...,
/// wall_ms`; everything except `wall_ms` is deterministic given the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub l_real: f64,
    pub l_fake: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub recon_id: f64,
    pub latent_gen: f64,
    pub latent_recon: f64,
    pub entropy: f64,
    pub attr: f64,
    pub k_t: f64,
    pub m_t: f64,
    pub gammas: Vec<f64>,
    pub wall_ms: f64,
}

impl StepReport {
    /// All loss/controller values finite (wall time excluded).
    pub fn is_finite(&self) -> bool {
        [
            self.l_real,
            self.l_fake,
            self.l_d,
            self.l_g,
            self.recon_id,
            self.latent_gen,
            self.latent_recon,
            self.entropy,
            self.attr,
            self.k_t,
            self.m_t,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.gammas.iter().all(|v| v.is_finite())
    }

    pub fn csv_header(gamma_count: usize) -> String {
        let mut cols: Vec<String> = [
            "step", "L_real", "L_fake", "L_D", "L_G", "eq3", "eq8a", "eq8b", "entropy", "attr",
            "k_t", "M_t",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..gamma_count {
            cols.push(format!("gamma_{i}"));
        }
        cols.push("wall_ms".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            self.l_real.to_string(),
            self.l_fake.to_string(),
            self.l_d.to_string(),
            self.l_g.to_string(),
            self.recon_id.to_string(),
            self.latent_gen.to_string(),
            self.latent_recon.to_string(),
            self.entropy.to_string(),
            self.attr.to_string(),
            self.k_t.to_string(),
            self.m_t.to_string(),
        ];
        for g in &self.gammas {
            cols.push(g.to_string());
        }
        cols.push(self.wall_ms.to_string());
        cols.join(",")
    }

    /// Equality up to the wall-time field.
    pub fn same_values(&self, other: &StepReport) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_ms = 0.0;
        b.wall_ms = 0.0;
        a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn tiny_batch_and_negative_weight_are_rejected() {
        let mut cfg = TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.batch = 2;
        cfg.entropy_weight = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig {
            batch: 8,
            ..TrainConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"batch": 4, "seed": 9}"#).unwrap();
        assert_eq!(cfg.batch, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.total_steps, TrainConfig::default().total_steps);
        assert_eq!(cfg.adam, TrainConfig::default().adam);
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let r = StepReport {
            step: 3,
            l_real: 1.0,
            l_fake: 0.5,
            l_d: 0.5,
            l_g: 0.5,
            recon_id: 0.1,
            latent_gen: 0.2,
            latent_recon: 0.3,
            entropy: -1.0,
            attr: 0.4,
            k_t: 0.01,
            m_t: 1.2,
            gammas: vec![1.0, 0.9],
            wall_ms: 7.5,
        };
        let header = StepReport::csv_header(2);
        assert_eq!(
            header.split(',').count(),
            r.csv_row().split(',').count()
        );
        assert!(header.ends_with("gamma_0,gamma_1,wall_ms"));
        assert!(r.is_finite());
        let mut other = r.clone();
        other.wall_ms = 99.0;
        assert!(r.same_values(&other));
        other.k_t = 0.5;
        assert!(!r.same_values(&other));
    }
}

//! Objective components: angle-histogram entropy, image reconstruction
//! distance, batch-merged loss max-pooling, latent identity distance,
//! attribute losses, adaptive loss mixing, and the proportional
//! discriminator/generator balance.
//!
//! Each loss exists in two forms where training needs it: a plain value
//! computation (diagnostics, tests) and a tape builder (differentiation).

mod attr;
mod began;
mod histogram;
mod identity;
mod mixer;
mod recon;

pub use attr::{
    focal_loss, focal_loss_on_tape, locality_loss, locality_loss_on_tape, softargmax,
    softargmax_on_tape, softmax_cross_entropy_on_tape,
};
pub use began::{began_losses_on_tape, BeganState};
pub use histogram::{
    cyclic_histogram, entropy_loss, entropy_loss_on_tape, CyclicHistogram,
};
pub use identity::{latent_identity_loss, latent_identity_on_tape};
pub use mixer::{adaptive_mix_on_tape, LossMixerState};
pub use recon::{
    keep_count, loss_max_pool, loss_max_pool_on_tape, recon_image_loss, recon_vector_map_on_tape,
};

/// Epsilon inside logarithms.
pub const EPS_H: f64 = 1e-12;

/// Default histogram node count.
pub const DEFAULT_HISTOGRAM_K: usize = 32;

/// Default keep ratio for loss max-pooling.
pub const DEFAULT_KEEP_RATIO: f64 = 0.3;

/// Default exponential-smoothing factor of the loss mixer.
pub const DEFAULT_MIXER_RHO: f64 = 0.99;

/// Default proportional gain of the balance update.
pub const DEFAULT_LAMBDA_K: f64 = 0.001;

/// Default diversity ratio of the balance update.
pub const DEFAULT_GAMMA_B: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("histogram needs at least 2 nodes, got {0}")]
    BadNodeCount(usize),
    #[error("latent dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("keep ratio must lie in (0, 1], got {0}")]
    BadKeepRatio(f64),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("all mixing weights are zero")]
    DegenerateGamma,
    #[error("reconstruction losses must be nonnegative, got real {l_real}, fake {l_fake}")]
    NegativeLoss { l_real: f64, l_fake: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

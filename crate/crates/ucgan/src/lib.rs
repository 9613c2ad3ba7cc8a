//! Desk-scale laboratory for diversity-preserving GAN training.
//!
//! The crate bundles a minimal reverse-mode autodiff engine restricted to a
//! smooth operator set, the unit-complex latent space with its cyclic-histogram
//! entropy loss, encoder-isolated identity losses, BEGAN-style training, and a
//! birthday-paradox support-size estimator, all validated on synthetic
//! datasets with known ground truth.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diversity;
pub mod latent;
pub mod losses;
pub mod models;
pub mod trainer;

pub mod cli;

pub use autodiff::{Tape, Tensor, ValueId};
pub use latent::LatentCode;

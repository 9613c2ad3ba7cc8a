//! Synthetic datasets with known ground truth and their file plumbing.
//!
//! Two data sources drive every experiment: a ring of 2-D Gaussians for the
//! mode-coverage benchmarks, and a sprite dataset whose exact template count
//! is known in advance so the support-size estimator can be validated
//! against an oracle. Images travel as PPM (P6, maxval 255), labels as CSV.

pub mod manifest;
pub mod ppm;
pub mod ring;
pub mod sprites;

pub use manifest::{column_name, encode_attrs, load_dataset, DatasetManifest, LoadedDataset};
pub use ppm::{bytes_to_planes, planes_to_bytes, read_ppm, write_ppm};
pub use ring::{covered_modes, gen_ring_gaussians, mode_centers};
pub use sprites::{gen_sprites, min_template_sq_distance, render_template, SpriteSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed ppm {path}: {reason}")]
    BadPpm { path: String, reason: String },
    #[error("malformed csv {path}: {reason}")]
    BadCsv { path: String, reason: String },
    #[error("label out of range in {path}: {reason}")]
    BadLabel { path: String, reason: String },
    #[error("manifest error: {0}")]
    BadManifest(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppm::{bytes_to_planes, read_ppm};
use super::DataError;
use crate::autodiff::Scalar;
use crate::models::{AttributeDef, AttributeKind};

/// On-disk description of a dataset directory. Paths are relative to the
/// manifest file's location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_dir: String,
    pub labels_csv: String,
    pub templates_csv: Option<String>,
    pub resolution: usize,
    pub count: usize,
    pub attributes: Vec<AttributeDef>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let json = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&json).map_err(|e| DataError::BadManifest(e.to_string()))
    }
}

/// CSV column carrying an attribute's label. Quantized attributes store the
/// bin index under `"{name}_bin"`.
/// Labels-CSV column for an attribute: quantized attributes store the bin
/// index, so their column carries a `_bin` suffix.
pub fn column_name(def: &AttributeDef) -> String {
    match def.kind {
        AttributeKind::Categorical { .. } => def.name.clone(),
        AttributeKind::QuantizedContinuous { .. } => format!("{}_bin", def.name),
    }
}

/// Conditioning vector for one sample: categorical attributes one-hot,
/// quantized ones as a normalized bin midpoint followed by a one-hot over
/// bins.
pub fn encode_attrs<T: Scalar>(defs: &[AttributeDef], bins: &[usize]) -> Vec<T> {
    assert_eq!(defs.len(), bins.len());
    let mut out = Vec::new();
    for (def, &b) in defs.iter().zip(bins) {
        match def.kind {
            AttributeKind::Categorical { classes } => {
                assert!(b < classes, "{}: label {b} of {classes}", def.name);
                for i in 0..classes {
                    out.push(if i == b { T::ONE } else { T::ZERO });
                }
            }
            AttributeKind::QuantizedContinuous { bins: nb } => {
                assert!(b < nb, "{}: bin {b} of {nb}", def.name);
                out.push(T::from_f64((b as f64 + 0.5) / nb as f64));
                for i in 0..nb {
                    out.push(if i == b { T::ONE } else { T::ZERO });
                }
            }
        }
    }
    out
}

/// In-memory dataset: channel-plane images in `[0, 1]`, per-attribute bin
/// labels, precomputed conditioning vectors, and optional template ids.
pub struct LoadedDataset<T> {
    pub resolution: usize,
    pub attributes: Vec<AttributeDef>,
    pub filenames: Vec<String>,
    pub images: Vec<Vec<T>>,
    pub labels: Vec<Vec<usize>>,
    pub attr_vecs: Vec<Vec<T>>,
    pub template_ids: Option<Vec<usize>>,
}

impl<T: Scalar> LoadedDataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic shuffled visiting order.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    pub fn attr_width(&self) -> usize {
        self.attributes.iter().map(|a| a.kind.width()).sum()
    }
}

/// Reads every image and label referenced by the manifest at
/// `manifest_path`. Rows keep CSV order; shuffling is the caller's job via
/// [`LoadedDataset::shuffled_indices`].
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<LoadedDataset<T>, DataError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let image_dir = base.join(&manifest.image_dir);
    let labels_path = base.join(&manifest.labels_csv);

    let bad_csv = |reason: String| DataError::BadCsv {
        path: labels_path.display().to_string(),
        reason,
    };

    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| bad_csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| bad_csv(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad_csv(format!("missing column {name}")))
    };
    let file_col = col("filename")?;
    let attr_cols: Vec<usize> = manifest
        .attributes
        .iter()
        .map(|def| col(&column_name(def)))
        .collect::<Result<_, _>>()?;

    let mut filenames = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut attr_vecs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad_csv(e.to_string()))?;
        let name = record
            .get(file_col)
            .ok_or_else(|| bad_csv("short row".into()))?
            .to_string();
        let mut bins = Vec::with_capacity(attr_cols.len());
        for (&c, def) in attr_cols.iter().zip(&manifest.attributes) {
            let raw = record
                .get(c)
                .ok_or_else(|| bad_csv("short row".into()))?;
            let bin: usize = raw.parse().map_err(|_| {
                bad_csv(format!("label {raw:?} for {} is not an index", def.name))
            })?;
            let arity = def.kind.head_width();
            if bin >= arity {
                return Err(DataError::BadLabel {
                    path: labels_path.display().to_string(),
                    reason: format!("{}: {bin} >= {arity} in {name}", def.name),
                });
            }
            bins.push(bin);
        }
        let path = image_dir.join(&name);
        let (w, h, rgb) = read_ppm(&path)?;
        if w != manifest.resolution || h != manifest.resolution {
            return Err(DataError::BadManifest(format!(
                "{name}: {w}x{h}, manifest says {0}x{0}",
                manifest.resolution
            )));
        }
        images.push(bytes_to_planes(&rgb, w, h));
        attr_vecs.push(encode_attrs(&manifest.attributes, &bins));
        labels.push(bins);
        filenames.push(name);
    }

    let template_ids = match &manifest.templates_csv {
        None => None,
        Some(rel) => {
            let tpath = base.join(rel);
            let mut tr = csv::Reader::from_path(&tpath).map_err(|e| DataError::BadCsv {
                path: tpath.display().to_string(),
                reason: e.to_string(),
            })?;
            let mut by_name: HashMap<String, usize> = HashMap::new();
            for record in tr.records() {
                let record = record.map_err(|e| DataError::BadCsv {
                    path: tpath.display().to_string(),
                    reason: e.to_string(),
                })?;
                let name = record.get(0).unwrap_or_default().to_string();
                let id: usize = record
                    .get(1)
                    .unwrap_or_default()
                    .parse()
                    .map_err(|_| DataError::BadCsv {
                        path: tpath.display().to_string(),
                        reason: "template id is not an index".into(),
                    })?;
                by_name.insert(name, id);
            }
            Some(
                filenames
                    .iter()
                    .map(|n| {
                        by_name.get(n).copied().ok_or_else(|| DataError::BadCsv {
                            path: tpath.display().to_string(),
                            reason: format!("no template id for {n}"),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };

    Ok(LoadedDataset {
        resolution: manifest.resolution,
        attributes: manifest.attributes,
        filenames,
        images,
        labels,
        attr_vecs,
        template_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sprites::{gen_sprites, render_template, SpriteSpec};

    #[test]
    fn attribute_encoding_layout() {
        let defs = vec![
            AttributeDef::quantized("age", 10),
            AttributeDef::categorical("gender", 2),
            AttributeDef::categorical("ethnicity", 5),
        ];
        let v: Vec<f64> = encode_attrs(&defs, &[3, 1, 2]);
        assert_eq!(v.len(), 11 + 2 + 5);
        assert!((v[0] - 0.35).abs() < 1e-12);
        assert_eq!(&v[1..11], &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(&v[11..13], &[0., 1.]);
        assert_eq!(&v[13..18], &[0., 0., 1., 0., 0.]);
    }

    #[test]
    fn generated_dataset_loads_bit_identically() {
        let dir = std::env::temp_dir().join(format!("ucgan-load-{}", std::process::id()));
        let spec = SpriteSpec::new(16, 3, 1);
        gen_sprites(&spec, 8, 9, &dir).unwrap();
        let ds: LoadedDataset<f32> = load_dataset(&dir.join("manifest.json")).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.attr_width(), (3 + 1) + 2 + 5);
        let ids = ds.template_ids.as_ref().unwrap();
        for (i, &t) in ids.iter().enumerate() {
            let expected: Vec<f32> = bytes_to_planes(&render_template(&spec, t), 16, 16);
            assert_eq!(
                ds.images[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            let (shape, palette, size, _) = spec.factors(t);
            assert_eq!(ds.labels[i], vec![size, shape, palette]);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let ds = LoadedDataset::<f64> {
            resolution: 8,
            attributes: vec![],
            filenames: (0..50).map(|i| format!("{i}")).collect(),
            images: vec![vec![]; 50],
            labels: vec![vec![]; 50],
            attr_vecs: vec![vec![]; 50],
            template_ids: None,
        };
        assert_eq!(ds.shuffled_indices(7), ds.shuffled_indices(7));
        assert_ne!(ds.shuffled_indices(7), ds.shuffled_indices(8));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ucgan-badlabel-{}", std::process::id()));
        let spec = SpriteSpec::new(16, 3, 1);
        gen_sprites(&spec, 2, 1, &dir).unwrap();
        let labels = dir.join("labels.csv");
        let mut text = std::fs::read_to_string(&labels).unwrap();
        text = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 2 {
                    let mut parts: Vec<&str> = l.split(',').collect();
                    parts[1] = "99";
                    parts.join(",")
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&labels, text).unwrap();
        let r: Result<LoadedDataset<f64>, _> = load_dataset(&dir.join("manifest.json"));
        assert!(matches!(r, Err(DataError::BadLabel { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}

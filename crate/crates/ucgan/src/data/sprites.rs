use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use super::ppm::write_ppm;
use super::DataError;
use crate::models::AttributeDef;

/// Factor grid of the synthetic sprite dataset.
///
/// Shape plays the role of a two-class attribute, palette a five-class one,
/// and the quantized size a binned continuous one. Position and background
/// shade are nuisance factors baked into the template identity, so the
/// total support is exactly `2 * 5 * size_bins * positions` images, which
/// is what makes the dataset usable as a support-size oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpriteSpec {
    pub resolution: usize,
    pub size_bins: usize,
    pub positions: usize,
}

pub const SPRITE_SHAPES: usize = 2;
pub const SPRITE_PALETTES: usize = 5;

const PALETTES: [[u8; 3]; SPRITE_PALETTES] = [
    [230, 51, 51],
    [51, 204, 64],
    [51, 77, 230],
    [217, 204, 51],
    [204, 51, 204],
];

impl SpriteSpec {
    pub fn new(resolution: usize, size_bins: usize, positions: usize) -> Self {
        assert!(resolution >= 8);
        assert!(size_bins >= 1 && positions >= 1);
        Self {
            resolution,
            size_bins,
            positions,
        }
    }

    /// Known support size.
    pub fn template_count(&self) -> usize {
        SPRITE_SHAPES * SPRITE_PALETTES * self.size_bins * self.positions
    }

    /// Decomposes a template id into (shape, palette, size_bin, position).
    pub fn factors(&self, template: usize) -> (usize, usize, usize, usize) {
        assert!(template < self.template_count());
        let shape = template % SPRITE_SHAPES;
        let rest = template / SPRITE_SHAPES;
        let palette = rest % SPRITE_PALETTES;
        let rest = rest / SPRITE_PALETTES;
        let size = rest % self.size_bins;
        let pos = rest / self.size_bins;
        (shape, palette, size, pos)
    }

    pub fn attribute_defs(&self) -> Vec<AttributeDef> {
        vec![
            AttributeDef::quantized("age", self.size_bins),
            AttributeDef::categorical("gender", SPRITE_SHAPES),
            AttributeDef::categorical("ethnicity", SPRITE_PALETTES),
        ]
    }
}

/// Renders one template as interleaved RGB bytes.
pub fn render_template(spec: &SpriteSpec, template: usize) -> Vec<u8> {
    let (shape, palette, size, pos) = spec.factors(template);
    let res = spec.resolution as f64;

    let radius = if spec.size_bins == 1 {
        res * 0.20
    } else {
        res * (0.10 + 0.22 * size as f64 / (spec.size_bins - 1) as f64)
    };
    let (cx, cy) = if spec.positions == 1 {
        (res / 2.0, res / 2.0)
    } else {
        let a = std::f64::consts::TAU * pos as f64 / spec.positions as f64;
        (
            res / 2.0 + res * 0.09 * a.cos(),
            res / 2.0 + res * 0.09 * a.sin(),
        )
    };
    let bg = 16 + (10 * pos as u32).min(120) as u8;
    let color = PALETTES[palette];
    // disc vs annulus: both shapes grow by a lattice-rich boundary ring per
    // size bin, so no two size bins can rasterize identically (a square
    // would quantize to even pixel widths and collide between bins)
    let hole = radius * 0.45;

    let n = spec.resolution;
    let mut rgb = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            let d2 = dx * dx + dy * dy;
            let inside = match shape {
                0 => d2 <= radius * radius,
                _ => d2 <= radius * radius && d2 > hole * hole,
            };
            let px = (y * n + x) * 3;
            if inside {
                rgb[px..px + 3].copy_from_slice(&color);
            } else {
                rgb[px] = bg;
                rgb[px + 1] = bg;
                rgb[px + 2] = bg;
            }
        }
    }
    rgb
}

fn sq_distance_early_exit(a: &[u8], b: &[u8], cutoff: f64) -> f64 {
    let mut acc = 0.0f64;
    for (chunk_a, chunk_b) in a.chunks(256).zip(b.chunks(256)) {
        for (&x, &y) in chunk_a.iter().zip(chunk_b) {
            let d = (x as f64 - y as f64) / 255.0;
            acc += d * d;
        }
        if acc > cutoff {
            return acc;
        }
    }
    acc
}

/// Exact minimum pairwise squared raw-pixel distance over all templates.
/// Zero would mean two templates render identically, which the generator
/// treats as a hard error.
pub fn min_template_sq_distance(spec: &SpriteSpec) -> f64 {
    let m = spec.template_count();
    assert!(m >= 2);
    let templates: Vec<Vec<u8>> = (0..m).map(|t| render_template(spec, t)).collect();
    let mut min = f64::INFINITY;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = sq_distance_early_exit(&templates[i], &templates[j], min);
            if d < min {
                min = d;
            }
        }
    }
    min
}

/// Writes `n` uniformly drawn template renderings plus labels, template
/// identities and a manifest into `out_dir`.
pub fn gen_sprites(
    spec: &SpriteSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let m = spec.template_count();
    let templates: Vec<Vec<u8>> = (0..m).map(|t| render_template(spec, t)).collect();

    // the support-size oracle needs all templates pairwise distinct
    let min_sq = min_template_sq_distance(spec);
    assert!(
        min_sq > 0.0,
        "sprite templates collide; factor grid too fine for the resolution"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = String::from("filename,age_bin,gender,ethnicity\n");
    let mut tmpl_rows = String::from("filename,template_id\n");
    for i in 0..n {
        let t = rng.random_range(0..m);
        let (shape, palette, size, _) = spec.factors(t);
        let name = format!("sprite_{i:05}.ppm");
        write_ppm(
            &out_dir.join(&name),
            spec.resolution,
            spec.resolution,
            &templates[t],
        )?;
        labels.push_str(&format!("{name},{size},{shape},{palette}\n"));
        tmpl_rows.push_str(&format!("{name},{t}\n"));
    }
    let labels_path = out_dir.join("labels.csv");
    fs::write(&labels_path, labels).map_err(|e| DataError::io(&labels_path, e))?;
    let tmpl_path = out_dir.join("templates.csv");
    fs::write(&tmpl_path, tmpl_rows).map_err(|e| DataError::io(&tmpl_path, e))?;

    let manifest = DatasetManifest {
        image_dir: ".".to_string(),
        labels_csv: "labels.csv".to_string(),
        templates_csv: Some("templates.csv".to_string()),
        resolution: spec.resolution,
        count: n,
        attributes: spec.attribute_defs(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;

    let mut readme = fs::File::create(out_dir.join("min_distance.txt"))
        .map_err(|e| DataError::io(out_dir, e))?;
    writeln!(readme, "{min_sq}").map_err(|e| DataError::io(out_dir, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn factor_grid_without_jitter_yields_exactly_the_grid() {
        let spec = SpriteSpec::new(32, 10, 1);
        assert_eq!(spec.template_count(), 100);
        let distinct: HashSet<Vec<u8>> = (0..100).map(|t| render_template(&spec, t)).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn factors_round_trip() {
        let spec = SpriteSpec::new(32, 10, 10);
        assert_eq!(spec.template_count(), 1000);
        let mut seen = HashSet::new();
        for t in 0..1000 {
            assert!(seen.insert(spec.factors(t)));
        }
    }

    #[test]
    fn min_distance_matches_brute_force_on_small_grid() {
        let spec = SpriteSpec::new(16, 2, 1);
        let m = spec.template_count();
        let templates: Vec<Vec<u8>> = (0..m).map(|t| render_template(&spec, t)).collect();
        let mut brute = f64::INFINITY;
        for i in 0..m {
            for j in (i + 1)..m {
                let d: f64 = templates[i]
                    .iter()
                    .zip(&templates[j])
                    .map(|(&a, &b)| {
                        let d = (a as f64 - b as f64) / 255.0;
                        d * d
                    })
                    .sum();
                brute = brute.min(d);
            }
        }
        let fast = min_template_sq_distance(&spec);
        assert!(fast > 0.0);
        assert!((fast - brute).abs() < 1e-12);
    }

    #[test]
    fn templates_of_the_oracle_grid_stay_distinct() {
        let spec = SpriteSpec::new(32, 10, 2);
        assert!(min_template_sq_distance(&spec) > 0.0);
    }

    #[test]
    fn generation_writes_labels_for_every_image() {
        let dir = std::env::temp_dir().join(format!("ucgan-sprites-{}", std::process::id()));
        let spec = SpriteSpec::new(16, 3, 1);
        let manifest = gen_sprites(&spec, 12, 5, &dir).unwrap();
        assert_eq!(manifest.count, 12);
        let labels = std::fs::read_to_string(dir.join("labels.csv")).unwrap();
        assert_eq!(labels.lines().count(), 13); // header + 12 rows
        assert!(labels.starts_with("filename,age_bin,gender,ethnicity"));
        let tmpl = std::fs::read_to_string(dir.join("templates.csv")).unwrap();
        assert_eq!(tmpl.lines().count(), 13);
        std::fs::remove_dir_all(&dir).ok();
    }
}

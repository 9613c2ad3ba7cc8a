use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::TAU;

/// Centers of `n_modes` equally spaced Gaussians on a circle of `radius`.
pub fn mode_centers(n_modes: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..n_modes)
        .map(|m| {
            let a = TAU * m as f64 / n_modes as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

/// Samples an equally weighted mixture of isotropic Gaussians on a ring.
pub fn gen_ring_gaussians(
    n_modes: usize,
    radius: f64,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    assert!(n_modes >= 2, "need at least two modes");
    assert!(sigma >= 0.0);
    let centers = mode_centers(n_modes, radius);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let (cx, cy) = centers[rng.random_range(0..n_modes)];
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            (cx + sigma * nx, cy + sigma * ny)
        })
        .collect()
}

/// Counts modes with at least `min_fraction` of the samples within
/// `3 * sigma` of their center.
pub fn covered_modes(
    samples: &[(f64, f64)],
    centers: &[(f64, f64)],
    sigma: f64,
    min_fraction: f64,
) -> usize {
    assert!(!samples.is_empty());
    let r2 = (3.0 * sigma) * (3.0 * sigma);
    let need = (min_fraction * samples.len() as f64).ceil() as usize;
    centers
        .iter()
        .filter(|&&(cx, cy)| {
            let hits = samples
                .iter()
                .filter(|&&(x, y)| {
                    let (dx, dy) = (x - cx, y - cy);
                    dx * dx + dy * dy <= r2
                })
                .count();
            hits >= need.max(1)
        })
        .count()
}

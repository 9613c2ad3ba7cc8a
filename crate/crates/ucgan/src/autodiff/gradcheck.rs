//! Finite-difference verification of the operator set.
//!
//! Every check builds a small computation in 64-bit mode, takes analytic
//! gradients with one backward pass, then probes each input element with
//! central differences over tape replay. Inputs are constructed (or
//! resampled) to sit at least 1e-3 away from the kinks of piecewise
//! operators, where finite differences would measure the wrong branch.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, ValueId};
use super::AutodiffError;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub partials: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

struct Built {
    tape: Tape<f64>,
    leaves: Vec<ValueId>,
    loss: ValueId,
}

/// `|a - n| / max(|a| + |n|, 1e-6)`: relative when gradients are large,
/// absolute in the noise floor.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Central finite differences for every element of every listed leaf.
fn max_fd_error(mut built: Built) -> Result<(f64, usize), AutodiffError> {
    let grads = built.tape.backward(built.loss)?;
    let mut worst = 0.0f64;
    let mut partials = 0;
    for &leaf in &built.leaves {
        let base = built.tape.value(leaf).to_vec();
        let analytic = grads.dense(leaf, base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += FD_STEP;
            built.tape.set_leaf_value(leaf, plus);
            built.tape.replay();
            let f_plus = built.tape.scalar_value(built.loss);

            let mut minus = base.clone();
            minus[i] -= FD_STEP;
            built.tape.set_leaf_value(leaf, minus);
            built.tape.replay();
            let f_minus = built.tape.scalar_value(built.loss);

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
            partials += 1;
        }
        built.tape.set_leaf_value(leaf, base);
        built.tape.replay();
    }
    Ok((worst, partials))
}

// ---- input construction helpers -----------------------------------------

fn vec_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Magnitudes in [lo, hi], random sign: guaranteed distance lo from zero.
fn vec_signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Angles strictly inside histogram segments: segment r of k spans
/// `[-pi + r*delta, -pi + (r+1)*delta]`; positions keep 10% margin.
fn safe_angles(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let delta = std::f64::consts::TAU / k as f64;
    (0..n)
        .map(|i| {
            let r = i % k;
            -std::f64::consts::PI + (r as f64 + rng.random_range(0.1..0.9)) * delta
        })
        .collect()
}

/// Minimum gap between sorted neighbours.
fn min_gap(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

// ---- individual checks ---------------------------------------------------

fn check_elementwise_chain(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![8], vec_uniform(rng, 8, 0.2, 2.0), true);
    let y = tape.leaf_data(vec![8], vec_uniform(rng, 8, 0.3, 1.5), true);
    let a = tape.square(x);
    let b = tape.sqrt(y);
    let c = tape.add(a, b);
    let d = tape.scale(c, 0.7);
    let e = tape.add_scalar(d, 0.25);
    let f = tape.log(e);
    let g = tape.exp(f);
    let h = tape.div(g, y);
    let i = tape.pow_scalar(h, 1.7);
    let loss = tape.mean_all(i);
    Some(Built {
        tape,
        leaves: vec![x, y],
        loss,
    })
}

fn check_sub_mul(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![2, 5], vec_signed(rng, 10, 0.05, 2.0), true);
    let y = tape.leaf_data(vec![2, 5], vec_signed(rng, 10, 0.05, 2.0), true);
    let d = tape.sub(x, y);
    let p = tape.mul(d, x);
    let s = tape.square(p);
    let loss = tape.sum_all(s);
    Some(Built {
        tape,
        leaves: vec![x, y],
        loss,
    })
}

fn check_abs(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![12], vec_signed(rng, 12, 0.1, 2.0), true);
    let a = tape.abs(x);
    let s = tape.mul(a, a);
    let loss = tape.mean_all(s);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_elu_mlp(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![4, 6], vec_signed(rng, 24, 0.01, 1.0), true);
    let w1 = tape.leaf_data(vec![6, 8], vec_signed(rng, 48, 0.01, 0.6), true);
    let b1 = tape.leaf_data(vec![8], vec_signed(rng, 8, 0.01, 0.3), true);
    let w2 = tape.leaf_data(vec![8, 8], vec_signed(rng, 64, 0.01, 0.6), true);
    let b2 = tape.leaf_data(vec![8], vec_signed(rng, 8, 0.01, 0.3), true);
    let w3 = tape.leaf_data(vec![8, 3], vec_signed(rng, 24, 0.01, 0.6), true);
    let b3 = tape.leaf_data(vec![3], vec_signed(rng, 3, 0.01, 0.3), true);

    let mut h = x;
    let mut pre_activations = Vec::new();
    for (w, b) in [(w1, b1), (w2, b2), (w3, b3)] {
        let m = tape.matmul(h, w);
        let z = tape.add_row_bias(m, b);
        pre_activations.push(z);
        h = tape.elu(z);
    }
    // resample when any ELU input sits near its kink
    for &z in &pre_activations {
        if tape.value(z).iter().any(|v| v.abs() < 1e-3) {
            return None;
        }
    }
    let sq = tape.square(h);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![x, w1, b1, w2, b2, w3, b3],
        loss,
    })
}

fn check_conv_pool_upsample(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![2, 2, 5, 5], vec_signed(rng, 100, 0.01, 1.0), true);
    let w = tape.leaf_data(vec![3, 2, 3, 3], vec_signed(rng, 54, 0.01, 0.5), true);
    let b = tape.leaf_data(vec![3], vec_signed(rng, 3, 0.01, 0.3), true);
    let c = tape.conv2d(x, w, 1);
    let cb = tape.add_channel_bias(c, b);
    let p = tape.avg_pool(cb, 2, 2);
    let u = tape.upsample_nearest2(p);
    let sq = tape.square(u);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![x, w, b],
        loss,
    })
}

fn check_softmax_select(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![3, 5], vec_signed(rng, 15, 0.01, 2.0), true);
    let sm = tape.softmax(x);
    let lg = tape.log(sm);
    let cols: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    let sel = tape.select_columns(lg, cols);
    let s = tape.sum_all(sel);
    let loss = tape.scale(s, -1.0 / 3.0);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_reductions(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let data = vec_uniform(rng, 9, -2.0, 2.0);
    if min_gap(&data) < 1e-3 {
        return None; // min/max need a clearly unique extremum
    }
    let x = tape.leaf_data(vec![9], data, true);
    let mn = tape.min_all(x);
    let mx = tape.max_all(x);
    let sm = tape.sum_all(x);
    let me = tape.mean_all(x);
    let parts = tape.stack_scalars(&[mn, mx, sm, me]);
    let sq = tape.square(parts);
    let loss = tape.sum_all(sq);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_concat_reshape(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let a = tape.leaf_data(vec![2, 3], vec_signed(rng, 6, 0.01, 1.0), true);
    let b = tape.leaf_data(vec![2, 2], vec_signed(rng, 4, 0.01, 1.0), true);
    let c = tape.concat(&[a, b], 1);
    let r = tape.reshape(c, vec![5, 2]);
    let w = tape.leaf_data(vec![2, 3], vec_signed(rng, 6, 0.01, 0.8), true);
    let m = tape.matmul(r, w);
    let sq = tape.square(m);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![a, b, w],
        loss,
    })
}

fn check_normalize_and_angles(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    // pairs with radius >= 0.4, angle away from the atan2 branch cut at pi
    let mut data = Vec::with_capacity(12);
    for _ in 0..6 {
        let r: f64 = rng.random_range(0.4..1.8);
        let a: f64 = rng.random_range(-2.9..2.9);
        data.push(r * a.cos());
        data.push(r * a.sin());
    }
    let x = tape.leaf_data(vec![12], data, true);
    let n = tape.normalize_pairs(x, 1e-8);
    let ang = tape.pair_angles(n);
    let sq = tape.square(ang);
    let s1 = tape.sum_all(sq);
    let nsq = tape.square(n);
    let s2 = tape.sum_all(nsq);
    let both = tape.stack_scalars(&[s1, s2]);
    let loss = tape.sum_all(both);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_histogram_entropy(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let k = 4;
    let angles = safe_angles(rng, 64, k);
    let x = tape.leaf_data(vec![64], angles, true);
    let h = tape.cyclic_histogram(x, k);
    let he = tape.add_scalar(h, 1e-12);
    let lg = tape.log(he);
    let p = tape.mul(h, lg);
    let loss = tape.sum_all(p);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_histogram_batched(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let k = 4;
    // [n=16, d=3] angles, all interior
    let mut data = Vec::with_capacity(48);
    for i in 0..48 {
        let delta = std::f64::consts::TAU / k as f64;
        let r = i % k;
        data.push(-std::f64::consts::PI + (r as f64 + rng.random_range(0.1..0.9)) * delta);
    }
    let x = tape.leaf_data(vec![16, 3], data, true);
    let h = tape.cyclic_histogram(x, k);
    let sq = tape.square(h);
    let loss = tape.sum_all(sq);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_top_k_mean(rng: &mut ChaCha8Rng) -> Option<Built> {
    let data = vec_uniform(rng, 12, 0.0, 3.0);
    if min_gap(&data) < 1e-3 {
        return None; // selection boundary must be unambiguous
    }
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![12], data, true);
    let sq = tape.square(x);
    let loss = tape.top_k_mean(sq, 4);
    // squaring reorders: re-check the selection margin on the squared values
    if min_gap(tape.value(sq)) < 1e-3 {
        return None;
    }
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

fn check_recon_map(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let n = 2 * 3 * 4 * 4;
    let xv = vec_uniform(rng, n, 0.05, 0.95);
    let yv = vec_uniform(rng, n, 0.05, 0.95);
    let x = tape.leaf_data(vec![2, 3, 4, 4], xv.clone(), true);
    let y = tape.leaf_data(vec![2, 3, 4, 4], yv.clone(), true);

    // the map is piecewise linear; resample when any |.| argument of the
    // color or gradient-magnitude terms sits near a kink
    for i in 0..n {
        if (xv[i] - yv[i]).abs() < 1e-3 {
            return None;
        }
    }
    if recon_kink_margin(&xv, 2, 4, 4) < 1e-3 || recon_kink_margin(&yv, 2, 4, 4) < 1e-3 {
        return None;
    }
    let m = tape.recon_image_map(x, y);
    // |m_x - m_y| kinks are inspected through the map's constituents; the
    // margin check above covers the inner ones, and the outer difference is
    // validated by probing the produced map for tiny values
    let mx = per_image_grad_mags(&xv, 2, 4, 4);
    let my = per_image_grad_mags(&yv, 2, 4, 4);
    for (a, b) in mx.iter().zip(&my) {
        if (a - b).abs() < 1e-3 {
            return None;
        }
    }
    let sq = tape.square(m);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![x, y],
        loss,
    })
}

/// Smallest |du|, |dv| over the luma stencils of a batch of images.
fn recon_kink_margin(v: &[f64], n: usize, h: usize, w: usize) -> f64 {
    let plane = h * w;
    let mut margin = f64::INFINITY;
    for ni in 0..n {
        let img = &v[ni * 3 * plane..(ni + 1) * 3 * plane];
        let yc: Vec<f64> = (0..plane)
            .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
            .collect();
        for i in 0..h {
            let up = i.saturating_sub(1);
            let dn = (i + 1).min(h - 1);
            for j in 0..w {
                let lf = j.saturating_sub(1);
                let rt = (j + 1).min(w - 1);
                let du = (yc[dn * w + j] - yc[up * w + j]) * 0.5;
                let dv = (yc[i * w + rt] - yc[i * w + lf]) * 0.5;
                // border-replicated differences are structurally zero at the
                // edges when up == dn; those are true constants, not kinks
                if up != dn {
                    margin = margin.min(du.abs());
                }
                if lf != rt {
                    margin = margin.min(dv.abs());
                }
            }
        }
    }
    margin
}

fn per_image_grad_mags(v: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        let img = &v[ni * 3 * plane..(ni + 1) * 3 * plane];
        let yc: Vec<f64> = (0..plane)
            .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
            .collect();
        for i in 0..h {
            let up = i.saturating_sub(1);
            let dn = (i + 1).min(h - 1);
            for j in 0..w {
                let lf = j.saturating_sub(1);
                let rt = (j + 1).min(w - 1);
                let du = (yc[dn * w + j] - yc[up * w + j]) * 0.5;
                let dv = (yc[i * w + rt] - yc[i * w + lf]) * 0.5;
                out.push(du.abs() + dv.abs());
            }
        }
    }
    out
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![2, 3, 2, 2], vec_signed(rng, 24, 0.01, 1.5), true);
    let gamma = tape.leaf_data(vec![3], vec_uniform(rng, 3, 0.5, 1.5), true);
    let beta = tape.leaf_data(vec![3], vec_signed(rng, 3, 0.01, 0.5), true);
    let (y, _, _) = tape.batch_norm(x, gamma, beta, 1e-5);
    let sq = tape.square(y);
    let m = tape.mean_all(sq);
    let c = tape.add_scalar(m, 1.0);
    let loss = tape.log(c);
    Some(Built {
        tape,
        leaves: vec![x, gamma, beta],
        loss,
    })
}

fn check_batch_norm_affine(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![5, 4], vec_signed(rng, 20, 0.01, 1.5), true);
    let gamma = tape.leaf_data(vec![4], vec_uniform(rng, 4, 0.5, 1.5), true);
    let beta = tape.leaf_data(vec![4], vec_signed(rng, 4, 0.01, 0.5), true);
    let mean = vec_signed(rng, 4, 0.01, 0.5);
    let var = vec_uniform(rng, 4, 0.5, 1.5);
    let y = tape.batch_norm_affine(x, gamma, beta, mean, var, 1e-5);
    let sq = tape.square(y);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![x, gamma, beta],
        loss,
    })
}

fn check_squash_broadcast(rng: &mut ChaCha8Rng) -> Option<Built> {
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![2, 3], vec_signed(rng, 6, 0.01, 2.0), true);
    let s = tape.squash01(x);
    let b = tape.broadcast_spatial(s, 2, 2);
    let sq = tape.square(b);
    let loss = tape.mean_all(sq);
    Some(Built {
        tape,
        leaves: vec![x],
        loss,
    })
}

type Builder = fn(&mut ChaCha8Rng) -> Option<Built>;

const CHECKS: &[(&str, Builder)] = &[
    ("elementwise_chain", check_elementwise_chain),
    ("sub_mul", check_sub_mul),
    ("abs", check_abs),
    ("elu_mlp", check_elu_mlp),
    ("conv_pool_upsample", check_conv_pool_upsample),
    ("softmax_select", check_softmax_select),
    ("reductions", check_reductions),
    ("concat_reshape", check_concat_reshape),
    ("normalize_pairs_angles", check_normalize_and_angles),
    ("cyclic_histogram_entropy", check_histogram_entropy),
    ("cyclic_histogram_batched", check_histogram_batched),
    ("top_k_mean", check_top_k_mean),
    ("recon_image_map", check_recon_map),
    ("batch_norm", check_batch_norm),
    ("batch_norm_affine", check_batch_norm_affine),
    ("squash_broadcast", check_squash_broadcast),
];

/// Runs the whole suite for one seed. Builders returning `None` (inputs too
/// close to a kink) are retried with fresh draws from the same stream.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(CHECKS.len());
    for (name, builder) in CHECKS {
        let mut built = None;
        for _ in 0..1000 {
            if let Some(b) = builder(&mut rng) {
                built = Some(b);
                break;
            }
        }
        let built = built.unwrap_or_else(|| panic!("check '{name}' kept landing on kinks"));
        let (max_rel_err, partials) = max_fd_error(built)?;
        reports.push(GradCheckReport {
            name,
            partials,
            max_rel_err,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        for report in run_suite(7).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {:.3e} over {} partials",
                report.name,
                report.max_rel_err,
                report.partials
            );
        }
    }

    #[test]
    fn suite_is_deterministic_bitwise() {
        let a = run_suite(11).unwrap();
        let b = run_suite(11).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.name, rb.name);
            assert_eq!(ra.max_rel_err.to_bits(), rb.max_rel_err.to_bits());
        }
    }
}

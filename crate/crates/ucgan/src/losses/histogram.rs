use super::{LossError, EPS_H};
use crate::autodiff::{Scalar, Tape, ValueId};

/// Soft histogram over the angle circle. Node r sits at `-pi + 2*pi*r/k`;
/// the wrap between the last node and the first closes the circle, so no
/// node is counted twice at the +/-pi seam.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicHistogram {
    k: usize,
    mass: Vec<f64>,
}

impl CyclicHistogram {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn node_angle(&self, r: usize) -> f64 {
        assert!(r < self.k);
        -std::f64::consts::PI + std::f64::consts::TAU * r as f64 / self.k as f64
    }

    pub fn from_mass(mass: Vec<f64>) -> Result<Self, LossError> {
        if mass.len() < 2 {
            return Err(LossError::BadNodeCount(mass.len()));
        }
        Ok(Self {
            k: mass.len(),
            mass,
        })
    }
}

/// Deposits each angle's 1/N mass onto its two adjacent nodes by linear
/// interpolation.
pub fn cyclic_histogram(angles: &[f64], k: usize) -> Result<CyclicHistogram, LossError> {
    if angles.is_empty() {
        return Err(LossError::EmptyInput("cyclic_histogram"));
    }
    if k < 2 {
        return Err(LossError::BadNodeCount(k));
    }
    let delta = std::f64::consts::TAU / k as f64;
    let w = 1.0 / angles.len() as f64;
    let mut mass = vec![0.0; k];
    for &a in angles {
        let p = (a + std::f64::consts::PI) / delta;
        let base = p.floor();
        let frac = p - base;
        let r0 = (base as isize).rem_euclid(k as isize) as usize;
        let r1 = (r0 + 1) % k;
        mass[r0] += (1.0 - frac) * w;
        mass[r1] += frac * w;
    }
    Ok(CyclicHistogram { k, mass })
}

/// `sum_r h_r * ln(h_r + eps)`: the negative entropy, minimized at `-ln k`
/// by the uniform mass vector.
pub fn entropy_loss(hist: &CyclicHistogram) -> f64 {
    hist.mass.iter().map(|&h| h * (h + EPS_H).ln()).sum()
}

/// Tape form of `entropy_loss(cyclic_histogram(angles))`. Rank-1 input is a
/// single angle set; rank-2 `[n, d]` builds one histogram per latent
/// dimension over the batch and averages the d entropy terms.
pub fn entropy_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, angles: ValueId, k: usize) -> ValueId {
    let dims = match tape.shape(angles).len() {
        1 => 1,
        2 => tape.shape(angles)[1],
        r => panic!("entropy loss supports rank 1 or 2 angle inputs, got {r}"),
    };
    let hist = tape.cyclic_histogram(angles, k);
    let shifted = tape.add_scalar(hist, T::from_f64(EPS_H));
    let lg = tape.log(shifted);
    let weighted = tape.mul(hist, lg);
    let total = tape.sum_all(weighted);
    tape.scale(total, T::ONE / T::from_f64(dims as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI, TAU};

    #[test]
    fn angle_at_node_is_one_hot() {
        for r in 0..4 {
            let h = cyclic_histogram(&[-PI + TAU * r as f64 / 4.0], 4).unwrap();
            let mut expected = vec![0.0; 4];
            expected[r] = 1.0;
            for (m, e) in h.mass().iter().zip(&expected) {
                assert!((m - e).abs() < 1e-12, "node {r}: {:?}", h.mass());
            }
        }
    }

    #[test]
    fn quarter_pi_splits_between_zero_and_half_pi_nodes() {
        // nodes at -pi, -pi/2, 0, pi/2
        let h = cyclic_histogram(&[FRAC_PI_4], 4).unwrap();
        let m = h.mass();
        assert!(m[0].abs() < 1e-12 && m[1].abs() < 1e-12);
        assert!((m[2] - 0.5).abs() < 1e-12 && (m[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_quarter_pi_wraps_to_first_node() {
        let h = cyclic_histogram(&[3.0 * FRAC_PI_4], 4).unwrap();
        let m = h.mass();
        assert!((m[0] - 0.5).abs() < 1e-12, "{m:?}");
        assert!(m[1].abs() < 1e-12 && m[2].abs() < 1e-12);
        assert!((m[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn node_angles_cover_the_circle_without_duplication() {
        let h = cyclic_histogram(&[0.0], 8).unwrap();
        assert_eq!(h.node_angle(0), -PI);
        let last = h.node_angle(7);
        assert!(last < PI, "last node {last} must not alias -pi");
        assert!((h.node_angle(4) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_uniform_mass_is_minus_ln_k() {
        let h = CyclicHistogram::from_mass(vec![0.125; 8]).unwrap();
        assert!((entropy_loss(&h) - (-(8.0f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let h = CyclicHistogram::from_mass(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(entropy_loss(&h).abs() < 1e-9);
    }

    #[test]
    fn entropy_of_two_point_half_half() {
        let h = CyclicHistogram::from_mass(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((entropy_loss(&h) - (-(2.0f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn empty_input_and_bad_k_are_errors() {
        assert!(matches!(
            cyclic_histogram(&[], 8),
            Err(LossError::EmptyInput(_))
        ));
        assert!(matches!(
            cyclic_histogram(&[0.0], 1),
            Err(LossError::BadNodeCount(1))
        ));
    }

    #[test]
    fn brute_force_uniform_angles_approach_uniform_mass() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let angles: Vec<f64> = (0..n)
            .map(|_| PI - TAU * rng.random::<f64>())
            .collect();
        let h = cyclic_histogram(&angles, 36).unwrap();
        let max_dev = h
            .mass()
            .iter()
            .map(|m| (m - 1.0 / 36.0).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 0.004, "max deviation {max_dev}");
    }

    #[test]
    fn tape_entropy_matches_value_entropy_per_dimension() {
        // [n=3, d=2] angles; tape averages the two per-dimension entropies
        let angles = [0.3f64, -1.2, 2.0, 0.9, -2.8, 0.1];
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![3, 2], angles.to_vec(), true);
        let loss = entropy_loss_on_tape(&mut tape, x, 8);
        let col0 = cyclic_histogram(&[angles[0], angles[2], angles[4]], 8).unwrap();
        let col1 = cyclic_histogram(&[angles[1], angles[3], angles[5]], 8).unwrap();
        let expected = (entropy_loss(&col0) + entropy_loss(&col1)) / 2.0;
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn tape_entropy_gradient_matches_finite_differences() {
        let k = 8;
        let delta = TAU / k as f64;
        // angles strictly inside segments, every segment populated
        let angles: Vec<f64> = (0..32)
            .map(|i| -PI + ((i % k) as f64 + 0.37 + 0.01 * (i / k) as f64) * delta)
            .collect();
        let eval = |a: &[f64]| entropy_loss(&cyclic_histogram(a, k).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![32], angles.clone(), true);
        let loss = entropy_loss_on_tape(&mut tape, x, k);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.dense(x, 32);
        let h = 1e-6;
        for i in 0..32 {
            let mut plus = angles.clone();
            plus[i] += h;
            let mut minus = angles.clone();
            minus[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom <= 1e-4,
                "angle {i}: {} vs {}",
                analytic[i],
                numeric
            );
        }
    }

    proptest! {
        #[test]
        fn mass_sums_to_one(angles in proptest::collection::vec(-3.14f64..3.14, 1..200), k in 2usize..40) {
            let h = cyclic_histogram(&angles, k).unwrap();
            let s: f64 = h.mass().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(h.mass().iter().all(|&m| m >= 0.0));
        }

        #[test]
        fn rotation_by_one_spacing_permutes_mass(
            angles in proptest::collection::vec(-3.0f64..3.0, 1..50),
            k in 2usize..16,
        ) {
            let delta = TAU / k as f64;
            let rotated: Vec<f64> = angles
                .iter()
                .map(|a| {
                    let mut r = a + delta;
                    if r > PI {
                        r -= TAU;
                    }
                    r
                })
                .collect();
            let h0 = cyclic_histogram(&angles, k).unwrap();
            let h1 = cyclic_histogram(&rotated, k).unwrap();
            for r in 0..k {
                prop_assert!(
                    (h0.mass()[r] - h1.mass()[(r + 1) % k]).abs() < 1e-6,
                    "node {} of {:?} vs {:?}", r, h0.mass(), h1.mass()
                );
            }
        }

        #[test]
        fn entropy_bounded_below_by_minus_ln_k(
            angles in proptest::collection::vec(-3.14f64..3.14, 1..100),
            k in 2usize..40,
        ) {
            let h = cyclic_histogram(&angles, k).unwrap();
            prop_assert!(entropy_loss(&h) >= -(k as f64).ln() - 1e-9);
        }
    }

    #[test]
    fn entropy_equals_bound_iff_uniform() {
        let k = 16;
        let uniform = CyclicHistogram::from_mass(vec![1.0 / k as f64; k]).unwrap();
        assert!((entropy_loss(&uniform) - (-(k as f64).ln())).abs() < 1e-6);
        let mut skew = vec![1.0 / k as f64; k];
        skew[0] += 0.01;
        skew[1] -= 0.01;
        let skewed = CyclicHistogram::from_mass(skew).unwrap();
        assert!(entropy_loss(&skewed) > -(k as f64).ln() + 1e-6);
    }
}

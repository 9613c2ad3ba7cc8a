use super::LossError;
use crate::autodiff::{Scalar, Tape, ValueId};

/// Per-pixel reconstruction distance between `[n, 3, h, w]` images in [0,1]:
/// doubled L1 color difference plus the difference of L1 luma-gradient
/// magnitudes. Returns the `[n, h, w]` loss map.
pub fn recon_image_loss(
    x: &[f64],
    y: &[f64],
    shape: &[usize],
) -> Result<Vec<f64>, LossError> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(LossError::ShapeMismatch(format!(
            "expected [n, 3, h, w], got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if x.len() != n || y.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "shape {shape:?} vs data lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let xi = tape.leaf_data(shape.to_vec(), x.to_vec(), false);
    let yi = tape.leaf_data(shape.to_vec(), y.to_vec(), false);
    let m = tape.recon_image_map(xi, yi);
    Ok(tape.value(m).to_vec())
}

/// Number of entries kept by loss max-pooling: `ceil(q * m)`, at least one.
pub fn keep_count(m: usize, q: f64) -> Result<usize, LossError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(LossError::BadKeepRatio(q));
    }
    if m == 0 {
        return Err(LossError::EmptyInput("loss_max_pool"));
    }
    Ok(((q * m as f64).ceil() as usize).clamp(1, m))
}

/// Mean of the `ceil(q*M)` largest entries of the merged pixel-loss set.
pub fn loss_max_pool(losses: &[f64], q: f64) -> Result<f64, LossError> {
    let keep = keep_count(losses.len(), q)?;
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[..keep].iter().sum::<f64>() / keep as f64)
}

/// Tape form: gradients flow only into the kept entries.
pub fn loss_max_pool_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    losses: ValueId,
    q: f64,
) -> Result<ValueId, LossError> {
    let m = tape.shape(losses).iter().product();
    let keep = keep_count(m, q)?;
    Ok(tape.top_k_mean(losses, keep))
}

/// Vector-mode reconstruction map: per-coordinate `2|x - y|`, the degenerate
/// form of the image distance when samples are plain vectors (no gradient
/// term). Same shape as the inputs.
pub fn recon_vector_map_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    y: ValueId,
) -> ValueId {
    let d = tape.sub(x, y);
    let a = tape.abs(d);
    tape.scale(a, T::from_f64(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_images_give_zero_map() {
        let shape = [1, 3, 4, 4];
        let x: Vec<f64> = (0..48).map(|i| (i as f64) / 48.0).collect();
        let m = recon_image_loss(&x, &x, &shape).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_images_differ_by_color_term_only() {
        let shape = [2, 3, 3, 3];
        let x = vec![0.0; 54];
        let y = vec![0.5; 54];
        let m = recon_image_loss(&x, &y, &shape).unwrap();
        // both gradients vanish; 3 channels * 2 * 0.5 per pixel
        for &v in &m {
            assert!((v - 3.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(recon_image_loss(&[0.0; 4], &[0.0; 4], &[1, 1, 2, 2]).is_err());
        assert!(recon_image_loss(&[0.0; 4], &[0.0; 8], &[1, 3, 2, 2]).is_err());
    }

    #[test]
    fn max_pool_examples() {
        assert_eq!(loss_max_pool(&[5.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 4.0);
        let mean = loss_max_pool(&[5.0, 1.0, 3.0, 2.0], 1.0).unwrap();
        assert!((mean - 2.75).abs() < 1e-12);
        assert_eq!(loss_max_pool(&[7.0; 9], 0.4).unwrap(), 7.0);
    }

    #[test]
    fn max_pool_rejects_bad_ratio_and_empty_input() {
        assert!(matches!(
            loss_max_pool(&[1.0], 0.0),
            Err(LossError::BadKeepRatio(_))
        ));
        assert!(matches!(
            loss_max_pool(&[1.0], 1.5),
            Err(LossError::BadKeepRatio(_))
        ));
        assert!(matches!(
            loss_max_pool(&[], 0.5),
            Err(LossError::EmptyInput(_))
        ));
    }

    #[test]
    fn tape_max_pool_routes_gradient_to_selected_only() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![4], vec![5.0f64, 1.0, 3.0, 2.0], true);
        let loss = loss_max_pool_on_tape(&mut tape, x, 0.5).unwrap();
        assert_eq!(tape.scalar_value(loss), 4.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.dense(x, 4), vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn vector_map_is_doubled_l1() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0], true);
        let y = tape.leaf_data(vec![2, 2], vec![1.5f64, 1.0, 3.0, 6.0], false);
        let m = recon_vector_map_on_tape(&mut tape, x, y);
        assert_eq!(tape.value(m), &[1.0, 2.0, 0.0, 4.0]);
    }

    proptest! {
        #[test]
        fn recon_map_is_symmetric(
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let shape = [1, 3, 4, 4];
            let x: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = recon_image_loss(&x, &y, &shape).unwrap();
            let b = recon_image_loss(&y, &x, &shape).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn max_pool_is_monotone_in_selected_entries(
            mut losses in proptest::collection::vec(0.0f64..10.0, 2..40),
            q in 0.05f64..1.0,
            bump in 0.01f64..5.0,
        ) {
            let before = loss_max_pool(&losses, q).unwrap();
            // bump the largest entry: it is always selected
            let idx = losses
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            losses[idx] += bump;
            let after = loss_max_pool(&losses, q).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}

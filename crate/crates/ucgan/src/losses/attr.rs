use super::{LossError, EPS_H};
use crate::autodiff::{Scalar, Tape, ValueId};

fn softmax_scaled(logits: &[f64], beta: f64) -> Vec<f64> {
    let mx = logits
        .iter()
        .map(|v| v * beta)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v * beta - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Expected distance of the softened prediction from the true bin:
/// `sum_i softmax(beta * logits)_i * |i - y|`.
pub fn locality_loss(logits: &[f64], true_bin: usize, beta: f64) -> Result<f64, LossError> {
    assert!(beta > 0.0, "temperature must be positive");
    if true_bin >= logits.len() {
        return Err(LossError::ClassOutOfRange {
            index: true_bin,
            classes: logits.len(),
        });
    }
    let sm = softmax_scaled(logits, beta);
    Ok(sm
        .iter()
        .enumerate()
        .map(|(i, p)| p * (i as f64 - true_bin as f64).abs())
        .sum())
}

/// Soft index expectation: `sum_i i * softmax(beta * logits)_i`.
pub fn softargmax(logits: &[f64], beta: f64) -> f64 {
    assert!(beta > 0.0, "temperature must be positive");
    softmax_scaled(logits, beta)
        .iter()
        .enumerate()
        .map(|(i, p)| i as f64 * p)
        .sum()
}

/// `-(1 - p_t)^gamma_f * ln(p_t + eps)` with `p_t = probs[true_class]`.
pub fn focal_loss(probs: &[f64], true_class: usize, gamma_f: f64) -> Result<f64, LossError> {
    assert!(gamma_f >= 0.0);
    let sum: f64 = probs.iter().sum();
    assert!(
        (sum - 1.0).abs() < 1e-5,
        "probabilities must sum to one, got {sum}"
    );
    if true_class >= probs.len() {
        return Err(LossError::ClassOutOfRange {
            index: true_class,
            classes: probs.len(),
        });
    }
    let p_t = probs[true_class];
    Ok(-((1.0 - p_t).powf(gamma_f)) * (p_t + EPS_H).ln())
}

fn batch_layout<T: Scalar>(tape: &Tape<T>, id: ValueId) -> (usize, usize) {
    match tape.shape(id) {
        [k] => (1, *k),
        [b, k] => (*b, *k),
        s => panic!("expected [k] or [batch, k] logits, got {s:?}"),
    }
}

fn check_bins(bins: &[usize], b: usize, k: usize) -> Result<(), LossError> {
    if bins.len() != b {
        return Err(LossError::ShapeMismatch(format!(
            "{b} rows but {} labels",
            bins.len()
        )));
    }
    for &y in bins {
        if y >= k {
            return Err(LossError::ClassOutOfRange {
                index: y,
                classes: k,
            });
        }
    }
    Ok(())
}

/// Batch mean of the locality loss; `bins` holds the true bin per row.
pub fn locality_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: ValueId,
    bins: &[usize],
    beta: f64,
) -> Result<ValueId, LossError> {
    assert!(beta > 0.0);
    let (b, k) = batch_layout(tape, logits);
    check_bins(bins, b, k)?;
    let scaled = tape.scale(logits, T::from_f64(beta));
    let sm = tape.softmax(scaled);
    let mut dist = Vec::with_capacity(b * k);
    for &y in bins {
        for i in 0..k {
            dist.push(T::from_f64((i as f64 - y as f64).abs()));
        }
    }
    let dist = tape.constant(tape.shape(logits).to_vec(), dist);
    let weighted = tape.mul(sm, dist);
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, T::ONE / T::from_f64(b as f64)))
}

/// Soft index expectation per row: `[batch, k]` logits give a `[batch]`
/// vector, rank-1 logits give a scalar.
pub fn softargmax_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: ValueId,
    beta: f64,
) -> ValueId {
    assert!(beta > 0.0);
    let rank1 = tape.shape(logits).len() == 1;
    let (b, k) = batch_layout(tape, logits);
    let wide = if rank1 {
        tape.reshape(logits, vec![1, k])
    } else {
        logits
    };
    let scaled = tape.scale(wide, T::from_f64(beta));
    let sm = tape.softmax(scaled);
    let idx: Vec<T> = (0..k).map(|i| T::from_f64(i as f64)).collect();
    let idx = tape.constant(vec![k, 1], idx);
    let expect = tape.matmul(sm, idx);
    if rank1 {
        tape.reshape(expect, vec![])
    } else {
        tape.reshape(expect, vec![b])
    }
}

/// Batch mean focal loss over an explicit probability matrix.
pub fn focal_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    probs: ValueId,
    classes: &[usize],
    gamma_f: f64,
) -> Result<ValueId, LossError> {
    assert!(gamma_f >= 0.0);
    let (b, k) = batch_layout(tape, probs);
    check_bins(classes, b, k)?;
    let wide = if tape.shape(probs).len() == 1 {
        tape.reshape(probs, vec![1, k])
    } else {
        probs
    };
    let p_t = tape.select_columns(wide, classes.to_vec());
    let ones = tape.constant(vec![b], vec![T::ONE; b]);
    let one_minus = tape.sub(ones, p_t);
    let focus = tape.pow_scalar(one_minus, T::from_f64(gamma_f));
    let shifted = tape.add_scalar(p_t, T::from_f64(EPS_H));
    let lg = tape.log(shifted);
    let prod = tape.mul(focus, lg);
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -T::ONE / T::from_f64(b as f64)))
}

/// Batch mean of `-ln softmax(logits)[class]`.
pub fn softmax_cross_entropy_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: ValueId,
    classes: &[usize],
) -> Result<ValueId, LossError> {
    let (b, k) = batch_layout(tape, logits);
    check_bins(classes, b, k)?;
    let wide = if tape.shape(logits).len() == 1 {
        tape.reshape(logits, vec![1, k])
    } else {
        logits
    };
    let sm = tape.softmax(wide);
    let shifted = tape.add_scalar(sm, T::from_f64(EPS_H));
    let lg = tape.log(shifted);
    let picked = tape.select_columns(lg, classes.to_vec());
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -T::ONE / T::from_f64(b as f64)))
}

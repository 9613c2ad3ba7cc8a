use super::LossError;
use crate::autodiff::{Scalar, Tape, ValueId};
use crate::latent::LatentCode;

/// Mean squared chordal distance between two codes: per pair,
/// `|u - u'|^2 = 2(1 - cos(da))` for unit pairs, so the range is [0, 4].
pub fn latent_identity_loss<T: Scalar>(
    a: &LatentCode<T>,
    b: &LatentCode<T>,
) -> Result<f64, LossError> {
    if a.d() != b.d() {
        return Err(LossError::DimensionMismatch(a.d(), b.d()));
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64();
            d * d
        })
        .sum();
    Ok(sum / a.d() as f64)
}

/// Tape form over raw pair buffers: rank-1 `[2d]` or rank-2 `[batch, 2d]`.
/// The result is the mean over all pairs in all samples.
pub fn latent_identity_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: ValueId,
    b: ValueId,
) -> ValueId {
    let sa = tape.shape(a);
    assert_eq!(sa, tape.shape(b), "latent identity shapes differ");
    let pairs: usize = sa.iter().product::<usize>() / 2;
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    tape.scale(s, T::ONE / T::from_f64(pairs as f64))
}

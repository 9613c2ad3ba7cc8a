use super::{LossError, DEFAULT_MIXER_RHO, EPS_H};
use crate::autodiff::{Scalar, Tape, ValueId};

/// Running state for the self-balancing loss mixer.
///
/// Each component loss keeps an exponential moving average of its magnitude;
/// the mixer rescales every component by `sum(s) / (n * s_i)` so that all of
/// them contribute at a comparable scale, then blends them with learnable
/// per-component gains. The weights are treated as constants when
/// differentiating, so the rebalancing never feeds back into the gradients
/// except through the overall scale.
#[derive(Debug, Clone)]
pub struct LossMixerState {
    n: usize,
    rho: f64,
    smoothed: Option<Vec<f64>>,
}

impl LossMixerState {
    pub fn new(n: usize) -> Self {
        Self::with_rho(n, DEFAULT_MIXER_RHO)
    }

    pub fn with_rho(n: usize, rho: f64) -> Self {
        assert!(n > 0, "mixer needs at least one component");
        assert!((0.0..1.0).contains(&rho), "rho must lie in [0, 1)");
        Self {
            n,
            rho,
            smoothed: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Smoothed per-component magnitudes, once at least one update ran.
    pub fn smoothed(&self) -> Option<&[f64]> {
        self.smoothed.as_deref()
    }

    /// Restores averages captured by an earlier run (checkpoint resume).
    pub fn set_smoothed(&mut self, smoothed: Vec<f64>) {
        assert_eq!(smoothed.len(), self.n);
        assert!(smoothed.iter().all(|s| s.is_finite() && *s >= 0.0));
        self.smoothed = Some(smoothed);
    }

    /// Folds the observed magnitudes into the averages and returns the
    /// balancing weights computed from the updated state. The first call
    /// seeds the averages with the observations themselves.
    pub fn update_and_weights(&mut self, values: &[f64]) -> Result<Vec<f64>, LossError> {
        if values.len() != self.n {
            return Err(LossError::ShapeMismatch(format!(
                "mixer holds {} components, got {} values",
                self.n,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LossError::ShapeMismatch(
                "non-finite loss value fed to mixer".into(),
            ));
        }
        let obs: Vec<f64> = values.iter().map(|v| v.abs().max(EPS_H)).collect();
        match &mut self.smoothed {
            None => self.smoothed = Some(obs),
            Some(s) => {
                for (si, vi) in s.iter_mut().zip(&obs) {
                    *si = (self.rho * *si + (1.0 - self.rho) * vi).max(EPS_H);
                }
            }
        }
        let s = self.smoothed.as_ref().unwrap();
        let total: f64 = s.iter().sum();
        let n = self.n as f64;
        Ok(s.iter().map(|si| total / (n * si)).collect())
    }
}

/// Blends scalar losses `v_ids` with learnable gains `gamma` (shape `[n]`):
/// `sum_i gamma_i^2 * v_i * w_i / sum_k gamma_k^2`, where `w` are the
/// balancing weights from `state` (constants on the tape).
pub fn adaptive_mix_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    state: &mut LossMixerState,
    v_ids: &[ValueId],
    gamma: ValueId,
) -> Result<ValueId, LossError> {
    if v_ids.is_empty() {
        return Err(LossError::EmptyInput("no losses to mix"));
    }
    if v_ids.len() != state.n() {
        return Err(LossError::ShapeMismatch(format!(
            "mixer holds {} components, got {} losses",
            state.n(),
            v_ids.len()
        )));
    }
    if tape.shape(gamma) != [state.n()] {
        return Err(LossError::ShapeMismatch(format!(
            "gamma shape {:?}, expected [{}]",
            tape.shape(gamma),
            state.n()
        )));
    }
    if tape.value(gamma).iter().all(|g| *g == T::ZERO) {
        return Err(LossError::DegenerateGamma);
    }
    for &v in v_ids {
        if !tape.shape(v).is_empty() {
            return Err(LossError::ShapeMismatch(format!(
                "mixer inputs must be scalars, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let values: Vec<f64> = v_ids.iter().map(|&v| tape.scalar_value(v).to_f64()).collect();
    let weights = state.update_and_weights(&values)?;

    let v = tape.stack_scalars(v_ids);
    let w: Vec<T> = weights.iter().map(|&x| T::from_f64(x)).collect();
    let w = tape.constant(vec![state.n()], w);
    let g2 = tape.square(gamma);
    let gv = tape.mul(g2, v);
    let gvw = tape.mul(gv, w);
    let num = tape.sum_all(gvw);
    let den = tape.sum_all(g2);
    Ok(tape.div(num, den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_component_is_identity() {
        let mut state = LossMixerState::new(1);
        let mut tape = Tape::new();
        let v = tape.leaf_data(vec![], vec![0.37f64], true);
        let gamma = tape.leaf_data(vec![1], vec![2.5f64], true);
        let out = adaptive_mix_on_tape(&mut tape, &mut state, &[v], gamma).unwrap();
        assert!((tape.scalar_value(out) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn equal_averages_give_unit_weights() {
        let mut state = LossMixerState::new(3);
        state.set_smoothed(vec![0.8, 0.8, 0.8]);
        let w = state.update_and_weights(&[0.8, 0.8, 0.8]).unwrap();
        for wi in w {
            assert!((wi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn known_averages_give_known_weights_and_mix() {
        let mut state = LossMixerState::with_rho(2, 0.0);
        let w = state.update_and_weights(&[1.0, 3.0]).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);

        let mut state = LossMixerState::with_rho(2, 0.0);
        let mut tape = Tape::new();
        let v1 = tape.leaf_data(vec![], vec![1.0f64], true);
        let v2 = tape.leaf_data(vec![], vec![3.0f64], true);
        let gamma = tape.leaf_data(vec![2], vec![1.0f64, 1.0], true);
        let out = adaptive_mix_on_tape(&mut tape, &mut state, &[v1, v2], gamma).unwrap();
        assert!((tape.scalar_value(out) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ema_update_follows_rho() {
        let mut state = LossMixerState::with_rho(2, 0.9);
        state.set_smoothed(vec![1.0, 2.0]);
        state.update_and_weights(&[2.0, 2.0]).unwrap();
        let s = state.smoothed().unwrap();
        assert!((s[0] - 1.1).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_all_zero_gamma() {
        let mut state = LossMixerState::new(2);
        let mut tape = Tape::new();
        let v1 = tape.leaf_data(vec![], vec![1.0f64], true);
        let v2 = tape.leaf_data(vec![], vec![2.0f64], true);
        let gamma = tape.leaf_data(vec![2], vec![0.0f64, 0.0], true);
        assert!(matches!(
            adaptive_mix_on_tape(&mut tape, &mut state, &[v1, v2], gamma),
            Err(LossError::DegenerateGamma)
        ));
    }

    // When the averages track the observations exactly (first update, or
    // rho = 0) the rebalanced components are all equal and the gains cancel;
    // a lagged average is what lets gradient reach them.
    #[test]
    fn gradient_reaches_gains_once_averages_lag() {
        let mut state = LossMixerState::with_rho(2, 0.99);
        state.set_smoothed(vec![1.0, 1.0]);
        let mut tape = Tape::new();
        let v1 = tape.leaf_data(vec![], vec![1.0f64], true);
        let v2 = tape.leaf_data(vec![], vec![3.0f64], true);
        let gamma = tape.leaf_data(vec![2], vec![1.0f64, 0.5], true);
        let out = adaptive_mix_on_tape(&mut tape, &mut state, &[v1, v2], gamma).unwrap();
        let grads = tape.backward(out).unwrap();
        let g = grads.dense(gamma, 2);
        assert!(g.iter().all(|x| x.is_finite() && *x != 0.0), "{g:?}");
    }

    proptest! {
        #[test]
        fn gain_scale_drops_out(
            scale in 0.05f64..20.0,
            g in proptest::collection::vec(0.1f64..3.0, 3),
            v in proptest::collection::vec(0.01f64..5.0, 3),
            s in proptest::collection::vec(0.01f64..5.0, 3),
        ) {
            let run = |gains: &[f64]| {
                let mut state = LossMixerState::new(3);
                state.set_smoothed(s.clone());
                let mut tape = Tape::new();
                let ids: Vec<_> = v
                    .iter()
                    .map(|&x| tape.leaf_data(vec![], vec![x], true))
                    .collect();
                let gamma = tape.leaf_data(vec![3], gains.to_vec(), true);
                let out = adaptive_mix_on_tape(&mut tape, &mut state, &ids, gamma).unwrap();
                tape.scalar_value(out)
            };
            let base = run(&g);
            let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
            let rescaled = run(&scaled);
            prop_assert!((base - rescaled).abs() <= 1e-6 * base.abs().max(1.0));
        }

        #[test]
        fn weights_stay_positive_and_average_near_one(
            v in proptest::collection::vec(1e-6f64..10.0, 4),
        ) {
            let mut state = LossMixerState::new(4);
            let w = state.update_and_weights(&v).unwrap();
            prop_assert!(w.iter().all(|x| *x > 0.0 && x.is_finite()));
            // harmonic-mean identity: sum_i s_i * w_i == sum_i s_i
            let s = state.smoothed().unwrap();
            let back: f64 = s.iter().zip(&w).map(|(si, wi)| si * wi).sum();
            let total: f64 = s.iter().sum();
            prop_assert!((back - total).abs() < 1e-9 * total.max(1.0));
        }
    }
}

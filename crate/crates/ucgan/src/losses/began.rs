use super::{LossError, DEFAULT_GAMMA_B, DEFAULT_LAMBDA_K};
use crate::autodiff::{Scalar, Tape, ValueId};

/// Proportional controller balancing the two reconstruction terms of the
/// energy-based critic. `k_t` throttles how hard the critic pushes away from
/// generated samples; it drifts toward the point where
/// `l_fake = gamma_b * l_real` and is clamped to `[0, 1]`. `m_t` is the
/// convergence measure `l_real + |gamma_b * l_real - l_fake|`.
#[derive(Debug, Clone)]
pub struct BeganState {
    k_t: f64,
    lambda_k: f64,
    gamma_b: f64,
    m_t: f64,
}

impl BeganState {
    pub fn new() -> Self {
        Self::with_params(DEFAULT_LAMBDA_K, DEFAULT_GAMMA_B)
    }

    pub fn with_params(lambda_k: f64, gamma_b: f64) -> Self {
        assert!(lambda_k > 0.0, "control gain must be positive");
        assert!(
            (0.0..=1.0).contains(&gamma_b),
            "diversity ratio must lie in [0, 1]"
        );
        Self {
            k_t: 0.0,
            lambda_k,
            gamma_b,
            m_t: f64::INFINITY,
        }
    }

    pub fn k_t(&self) -> f64 {
        self.k_t
    }

    pub fn m_t(&self) -> f64 {
        self.m_t
    }

    pub fn gamma_b(&self) -> f64 {
        self.gamma_b
    }

    /// Restores controller state captured by an earlier run.
    pub fn set_k_t(&mut self, k_t: f64) {
        assert!((0.0..=1.0).contains(&k_t));
        self.k_t = k_t;
    }

    /// Folds one step's reconstruction losses into the controller.
    /// Both inputs are mean absolute errors, so negative values mean the
    /// caller wired the losses wrong.
    pub fn update(&mut self, l_real: f64, l_fake: f64) -> Result<(), LossError> {
        if !(l_real.is_finite() && l_fake.is_finite()) || l_real < 0.0 || l_fake < 0.0 {
            return Err(LossError::NegativeLoss { l_real, l_fake });
        }
        let balance = self.gamma_b * l_real - l_fake;
        self.k_t = (self.k_t + self.lambda_k * balance).clamp(0.0, 1.0);
        self.m_t = l_real + balance.abs();
        Ok(())
    }
}

impl Default for BeganState {
    fn default() -> Self {
        Self::new()
    }
}

/// Critic objective `l_real - k_t * l_fake` with the current (pre-update)
/// `k_t` baked in as a constant. Call `BeganState::update` separately with
/// the detached loss values.
pub fn began_losses_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    l_real: ValueId,
    l_fake: ValueId,
    k_t: f64,
) -> ValueId {
    assert!((0.0..=1.0).contains(&k_t), "k_t out of range: {k_t}");
    assert!(tape.shape(l_real).is_empty() && tape.shape(l_fake).is_empty());
    let scaled = tape.scale(l_fake, T::from_f64(k_t));
    tape.sub(l_real, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_losses_leave_k_unchanged() {
        let mut s = BeganState::with_params(0.001, 0.7);
        s.set_k_t(0.4);
        s.update(2.0, 1.4).unwrap();
        assert!((s.k_t() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn one_step_from_zero() {
        let mut s = BeganState::with_params(0.001, 0.5);
        s.update(1.0, 0.3).unwrap();
        assert!((s.k_t() - 0.0002).abs() < 1e-12, "{}", s.k_t());
        assert!((s.m_t() - 1.2).abs() < 1e-12, "{}", s.m_t());
    }

    #[test]
    fn k_clamps_at_both_ends() {
        let mut s = BeganState::with_params(0.9, 1.0);
        for _ in 0..10 {
            s.update(5.0, 0.0).unwrap();
        }
        assert_eq!(s.k_t(), 1.0);
        for _ in 0..10 {
            s.update(0.0, 5.0).unwrap();
        }
        assert_eq!(s.k_t(), 0.0);
    }

    #[test]
    fn rejects_negative_losses() {
        let mut s = BeganState::new();
        assert!(matches!(
            s.update(-0.1, 0.2),
            Err(LossError::NegativeLoss { .. })
        ));
        assert!(matches!(
            s.update(0.1, -0.2),
            Err(LossError::NegativeLoss { .. })
        ));
    }

    #[test]
    fn critic_objective_value_and_gradients() {
        let mut tape = Tape::new();
        let lr = tape.leaf_data(vec![], vec![0.8f64], true);
        let lf = tape.leaf_data(vec![], vec![0.5f64], true);
        let ld = began_losses_on_tape(&mut tape, lr, lf, 0.25);
        assert!((tape.scalar_value(ld) - (0.8 - 0.25 * 0.5)).abs() < 1e-12);
        let grads = tape.backward(ld).unwrap();
        assert!((grads.dense(lr, 1)[0] - 1.0).abs() < 1e-12);
        assert!((grads.dense(lf, 1)[0] + 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn k_stays_in_unit_interval(
            start in 0.0f64..=1.0,
            steps in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..50),
            lambda in 0.0001f64..0.5,
            gamma in 0.0f64..=1.0,
        ) {
            let mut s = BeganState::with_params(lambda, gamma);
            s.set_k_t(start);
            for (lr, lf) in steps {
                s.update(lr, lf).unwrap();
                prop_assert!((0.0..=1.0).contains(&s.k_t()));
                prop_assert!(s.m_t() >= 0.0);
            }
        }
    }
}

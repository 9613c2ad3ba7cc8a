use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Scalar};

/// Adam settings. The learning rate decays continuously:
/// `lr(t) = base * decay_rate^(t / decay_steps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.96,
            decay_steps: 1000.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction over named parameter buffers. One optimizer
/// step covers all parameters of one network; call [`begin_step`] once per
/// step, then [`update`] per parameter.
///
/// [`begin_step`]: AdamOptimizer::begin_step
/// [`update`]: AdamOptimizer::update
#[derive(Debug, Clone)]
pub struct AdamOptimizer<T> {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamOptimizer<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Effective learning rate at the current step count.
    pub fn effective_lr(&self) -> f64 {
        let t = self.step.saturating_sub(1) as f64;
        self.cfg.lr * self.cfg.decay_rate.powf(t / self.cfg.decay_steps)
    }

    /// Advances the shared step counter; the counter drives both bias
    /// correction and the decay schedule.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// In-place Adam update of one named parameter buffer.
    pub fn update(
        &mut self,
        name: &str,
        data: &mut [T],
        grad: &[T],
    ) -> Result<(), AutodiffError> {
        assert!(self.step >= 1, "begin_step before update");
        if data.len() != grad.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "adam '{name}': {} params vs {} grads",
                data.len(),
                grad.len()
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(AutodiffError::NonFinite(format!("adam gradient '{name}'")));
        }
        let n = data.len();
        let t = self.step as f64;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powf(t));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powf(t));
        let lr = T::from_f64(self.effective_lr());
        let eps = T::from_f64(self.cfg.eps);
        let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        });
        assert_eq!(entry.m.len(), n, "adam '{name}': parameter length changed");

        for i in 0..n {
            let g = grad[i];
            entry.m[i] = b1 * entry.m[i] + one_m_b1 * g;
            entry.v[i] = b2 * entry.v[i] + one_m_b2 * g * g;
            let m_hat = entry.m[i] / corr1;
            let v_hat = entry.v[i] / corr2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = AdamOptimizer::new(AdamConfig::default());
        let mut p = vec![1.0f64, -2.0, 3.5];
        opt.begin_step();
        opt.update("w", &mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamOptimizer::new(AdamConfig::default());
        let mut p = vec![0.0f64, 0.0];
        opt.begin_step();
        opt.update("w", &mut p, &[3.0, -0.25]).unwrap();
        assert!((p[0] - (-1e-4)).abs() < 1e-9, "{}", p[0]);
        assert!((p[1] - 1e-4).abs() < 1e-9, "{}", p[1]);
    }

    #[test]
    fn quadratic_descends_two_steps() {
        // f(x) = x^2 from x = 1 with lr 0.1: the first step lands exactly on
        // 0.9, the second near 0.8004.
        let cfg = AdamConfig {
            lr: 0.1,
            decay_rate: 1.0,
            ..AdamConfig::default()
        };
        let mut opt = AdamOptimizer::new(cfg);
        let mut x = vec![1.0f64];
        let x0 = x[0];
        opt.begin_step();
        let g = 2.0 * x[0];
        opt.update("x", &mut x, &[g]).unwrap();
        let x1 = x[0];
        opt.begin_step();
        let g = 2.0 * x[0];
        opt.update("x", &mut x, &[g]).unwrap();
        let x2 = x[0];
        assert!(x1 < x0 && x2 < x1, "{x0} -> {x1} -> {x2}");
        assert!((x1 - 0.9).abs() < 1e-6);
        assert!((x2 - 0.8004).abs() < 1e-3);
    }

    #[test]
    fn learning_rate_decays_exponentially() {
        let mut opt = AdamOptimizer::<f64>::new(AdamConfig::default());
        opt.begin_step();
        assert!((opt.effective_lr() - 1e-4).abs() < 1e-18);
        for _ in 0..1000 {
            opt.begin_step();
        }
        // step counter 1001, exponent 1000/1000 = 1
        assert!((opt.effective_lr() - 0.96e-4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut opt = AdamOptimizer::new(AdamConfig::default());
        let mut p = vec![1.0f64];
        opt.begin_step();
        assert!(opt.update("w", &mut p, &[f64::NAN]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamOptimizer::new(AdamConfig::default());
        let mut p = vec![1.0f64];
        opt.begin_step();
        assert!(opt.update("w", &mut p, &[1.0, 2.0]).is_err());
    }
}

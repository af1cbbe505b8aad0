//! Bias-corrected adaptive-moment (Adam) updates and a box-projected driver.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Real;

/// Adam hyper-parameters and step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

/// One Adam step, in place: `iterate -= lr · m̂ / (√v̂ + ε)`.
pub fn adam_step<T: Real>(
    iterate: &mut [T],
    gradient: &[T],
    state: &mut AdamState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    ensure_len(iterate.len(), gradient.len())?;
    ensure_len(iterate.len(), state.m.len())?;
    state.t += 1;
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let one = T::one();
    let bc1 = one - T::lit(config.beta1.powi(state.t as i32));
    let bc2 = one - T::lit(config.beta2.powi(state.t as i32));
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.epsilon);
    for ((x, &g), (m, v)) in iterate
        .iter_mut()
        .zip(gradient)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Runs `config.steps` Adam steps on `objective`, clamping every coordinate
/// to `[0, 1]` after each step.
///
/// `objective` returns the value and gradient at the current iterate. The
/// best iterate seen (including the start) is returned with its value.
pub fn minimize_in_unit_box<T: Real>(
    start: Vec<T>,
    config: &OptimizerConfig,
    mut objective: impl FnMut(&[T]) -> Result<(f64, Vec<T>)>,
) -> Result<(Vec<T>, f64)> {
    let mut x = start;
    let mut state = AdamState::new(x.len());
    let (mut value, mut grad) = objective(&x)?;
    let mut best = (x.clone(), value);
    for _ in 0..config.steps {
        adam_step(&mut x, &grad, &mut state, config)?;
        for v in x.iter_mut() {
            *v = v.clamp_unit();
        }
        (value, grad) = objective(&x)?;
        if value < best.1 {
            best = (x.clone(), value);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_iterate() {
        let cfg = OptimizerConfig::default();
        let mut x = vec![0.3, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut x, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = OptimizerConfig::default();
        let mut x = vec![0.0f64];
        let mut s = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = x[0];
            adam_step(&mut x, &[-3.7], &mut s, &cfg).unwrap();
            last = x[0] - before;
        }
        assert!((last - cfg.learning_rate).abs() < 1e-6, "{last}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = OptimizerConfig::default();
        let target = [0.7, -0.4];
        let mut x = vec![0.0f64, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..1000 {
            let g: Vec<f64> = x
                .iter()
                .zip(&target)
                .zip([1.0, 4.0])
                .map(|((xi, ti), w)| 2.0 * w * (xi - ti))
                .collect();
            adam_step(&mut x, &g, &mut s, &cfg).unwrap();
        }
        let dist = ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt();
        assert!(dist < 1e-4, "distance {dist}");
    }

    #[test]
    fn works_in_f32() {
        let cfg = OptimizerConfig::default();
        let mut x = vec![1.0f32];
        let mut s = AdamState::new(1);
        adam_step(&mut x, &[1.0], &mut s, &cfg).unwrap();
        assert!((x[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig::default().with_steps(0).validate().is_err());
        assert!(OptimizerConfig::default().with_learning_rate(0.0).validate().is_err());
        let mut c = OptimizerConfig::default();
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::<f64>::new(2);
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut s, &OptimizerConfig::default()).is_err());
    }
}

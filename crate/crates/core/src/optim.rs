//! Adam and AdamW over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay (AdamW). Zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            ..Self::default()
        }
    }
}

/// First and second moment state for one parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Apply one update. `params` and `grads` must have the buffer's length.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter buffer length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient buffer length mismatch");
        self.step += 1;
        let lr = T::lit(self.config.learning_rate);
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.epsilon);
        let decay = T::lit(self.config.learning_rate * self.config.weight_decay);
        let bias1 = T::one() - b1.powi(self.step);
        let bias2 = T::one() - b2.powi(self.step);
        let one = T::one();
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if decay != T::zero() {
                *p -= decay * *p;
            }
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut opt = Adam::<f64>::new(AdamConfig::adam(0.01), 2);
        let mut p = [1.0, -1.0];
        opt.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut opt = Adam::<f64>::new(AdamConfig::adamw(0.1, 0.5), 1);
        let mut p = [2.0];
        opt.update(&mut p, &[0.0]);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::<f32>::new(AdamConfig::adam(0.05), 1);
        let mut p = [3.0f32];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.update(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}

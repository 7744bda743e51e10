use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use crate::{Element, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, ArrayD<T>)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = T::of(1.0 - b1.powi(t));
        let c2 = T::of(1.0 - b2.powi(t));
        let (b1, b2) = (T::of(b1), T::of(b2));
        let eps = T::of(self.config.eps);
        let lr = T::of(lr);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            let p = store.value_mut(*id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Learning rate decaying linearly from `initial` to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDecay {
    pub initial: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.initial;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.initial * (1.0 - frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn linear_decay_formula() {
        let s = LinearDecay {
            initial: 6e-5,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 6e-5);
        assert!((s.lr_at(25) - 4.5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(100), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[(id, g)], 0.1);
        let w = store.get(id);
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] - 1.1).abs() < 1e-6);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate at every epoch end.
    pub epoch_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, epoch_decay: 0.999, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction and a per-epoch multiplicative learning-rate
/// schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(DiffError::Checkpoint(format!("learning rate must be positive, got {}", config.learning_rate)));
        }
        let first: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let second = first.clone();
        Ok(Self { config, lr: config.learning_rate, step: 0, first, second })
    }

    pub(crate) fn from_parts(config: AdamConfig, lr: f64, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self { config, lr, step, first, second }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Applies one update. Every gradient is checked for non-finite entries
    /// before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = store.param(id);
            if g.shape() != p.value.shape() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    detail: format!("gradient {:?} for `{}` shaped {:?}", g.shape(), p.name, p.value.shape()),
                });
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(DiffError::NonFiniteGradient {
                    name: p.name.clone(),
                    step: self.step,
                    detail: format!("element {} = {}, grad norm {}", pos, g.data()[pos], grads.global_norm()),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.epoch_decay;
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Mode};

    fn scalar_store(v: f64) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: crate::ParamId, scale: f64) -> Gradients {
        // d/dw (scale * w) = scale
        let mut g = Graph::new(store, Mode::Train);
        let w = g.param(id);
        let y = g.scale(w, scale);
        g.backward(y).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(1.5);
        let mut adam = Adam::new(&s, AdamConfig::default()).unwrap();
        let g = grads_for(&s, id, 0.0);
        for _ in 0..5 {
            adam.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default()).unwrap();
        let g = grads_for(&s, id, 1.0);
        adam.step(&mut s, &g).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        let expected = -5e-4 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_after_200_epochs() {
        let (s, _) = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default()).unwrap();
        for _ in 0..200 {
            adam.end_epoch();
        }
        let direct = 0.0005 * 0.999f64.powi(200);
        assert!((adam.learning_rate() - direct).abs() < 1e-15);
        assert!((adam.learning_rate() - 4.094e-4).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let (mut s, id) = scalar_store(2.0);
        let mut adam = Adam::new(&s, AdamConfig::default()).unwrap();
        let g = grads_for(&s, id, f64::NAN);
        let err = adam.step(&mut s, &g).unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteGradient { ref name, .. } if name == "w"));
        assert_eq!(s.value(id).item(), 2.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        let (s, _) = scalar_store(0.0);
        let cfg = AdamConfig { learning_rate: 0.0, ..Default::default() };
        assert!(Adam::new(&s, cfg).is_err());
    }
}

//! Mini-batch SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD state: hyperparameters plus one velocity buffer per parameter.
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, params: &[Tensor]) -> Sgd {
        assert!(learning_rate >= 0.0, "learning rate must be non-negative");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// One update: `v <- momentum*v + grad + weight_decay*param`,
    /// `param <- param - lr*v`, then zero the gradients.
    ///
    /// `params` must be the same slice (same order) the optimizer was built
    /// with; every parameter must carry a gradient.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::contract(format!(
                "optimizer built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad().ok_or_else(|| {
                Error::contract("sgd step: parameter is missing its gradient".to_string())
            })?;
            debug_assert_eq!(grad.len(), v.len());
            let mut vals = p.values();
            for i in 0..vals.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * vals[i];
                vals[i] -= self.learning_rate * v[i];
            }
            p.set_values(&vals);
            p.zero_grad();
        }
        Ok(())
    }
}

//! SGD with momentum and weight decay.

use std::collections::HashMap;

use crate::tensor::Parameter;

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// One update over the given parameters; parameters without a gradient
    /// (frozen, or untouched this step) are skipped. Gradients are not
    /// cleared here.
    pub fn step(&mut self, params: &[&Parameter]) {
        for p in params {
            let Some(grad) = p.grad() else { continue };
            let v = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
            p.apply_update(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + wd * data[i];
                    v[i] = mu * v[i] + g;
                    data[i] -= lr * v[i];
                }
            });
        }
    }
}

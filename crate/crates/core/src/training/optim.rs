use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First-order optimizer over a flat list of parameter tensors, with weight
/// decay applied directly to the weights rather than through the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps taken so far.
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Structure(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let values = p.values_mut();
            if values.len() != g.len() {
                return Err(Error::Structure(format!("gradient {k} has the wrong length")));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in values.iter_mut().zip(g) {
                        *w = *w * decay - lr * d;
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..values.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        values[i] = values[i] * decay - lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

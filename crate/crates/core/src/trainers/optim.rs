//! Plain SGD and Adam over a flat parameter buffer, with optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, TrainingConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters, recorded in saved models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn from_training(cfg: &TrainingConfig) -> Self {
        Self { algorithm: cfg.optimizer(), learning_rate: cfg.learning_rate(), max_grad_norm: cfg.max_grad_norm() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let moments = if config.algorithm == OptimizerKind::Adam { num_params } else { 0 };
        Self { config, m: vec![0.0; moments], v: vec![0.0; moments], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is clipped in place when a threshold is set.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) {
        debug_assert_eq!(params.len(), grads.len());
        if let Some(max) = self.config.max_grad_norm {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.algorithm {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

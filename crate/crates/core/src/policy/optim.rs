use serde::{Deserialize, Serialize};

use super::linalg::norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// Per-parameter running averages of squared gradients and squared updates.
#[derive(Debug, Clone)]
pub struct Adadelta {
    config: AdadeltaConfig,
    eg2: Vec<f64>,
    edx2: Vec<f64>,
}

impl Adadelta {
    pub fn new(n: usize, config: AdadeltaConfig) -> Self {
        Adadelta {
            config,
            eg2: vec![0.0; n],
            edx2: vec![0.0; n],
        }
    }

    /// Moves `params` against `grad`.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdadeltaConfig { rho, eps, lr } = self.config;
        for i in 0..params.len() {
            let g = grad[i];
            self.eg2[i] = rho * self.eg2[i] + (1.0 - rho) * g * g;
            let dx = -((self.edx2[i] + eps).sqrt() / (self.eg2[i] + eps).sqrt()) * g;
            self.edx2[i] = rho * self.edx2[i] + (1.0 - rho) * dx * dx;
            params[i] += lr * dx;
        }
    }

    /// Moves `params` along `grad` (reward maximization).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.descend(params, &neg);
    }
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(grad);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    n
}

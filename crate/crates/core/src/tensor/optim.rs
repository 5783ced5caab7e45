use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over an explicit parameter group. Parameters outside the group are
/// never read or written.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    group: Vec<ParamId>,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, group: Vec<ParamId>) -> Self {
        Self {
            config,
            group,
            moments: HashMap::new(),
            steps: 0,
        }
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter in the group, then zeroes their
    /// gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for &id in &self.group {
            let param = store.get_mut(id);
            let Some(grad) = param.grad.as_mut() else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let values = param.value.data_mut();
            for (i, g) in grad.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * *g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * *g * *g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                values[i] -= lr * mh / (vh.sqrt() + eps);
                *g = 0.0;
            }
        }
    }

    /// Zeroes the group's gradients without updating.
    pub fn zero_grad(&self, store: &mut ParamStore) {
        for &id in &self.group {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

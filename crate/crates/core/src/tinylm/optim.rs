use serde::{Deserialize, Serialize};

use super::{Grads, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let n = params.num_params();
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &Grads) {
        let c = &self.config;
        let mut g = grads.flatten();
        if c.clip_norm > 0.0 {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > c.clip_norm {
                let f = c.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(|_, s| {
            for (i, x) in s.iter_mut().enumerate() {
                let j = off + i;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                *x -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
            off += s.len();
        });
    }
}

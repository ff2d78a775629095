use serde::{Deserialize, Serialize};

use super::{Mat, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Tensors whose `trainable` flag is false are never
/// touched, not even by a zero update.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| Mat::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, trainable: &[bool]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let grads: Vec<&Mat> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

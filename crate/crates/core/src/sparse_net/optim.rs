//! AdamW: adaptive moments with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Scalar, TransitionKernelModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-4, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable tensor of `model` from `grads`.
    pub fn step<S: Scalar>(&mut self, model: &mut TransitionKernelModel<S>, grads: &[Vec<S>]) -> Result<()> {
        let trainable: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
        let values = model.values_mut();
        if grads.len() != values.len() || grads.iter().zip(values.iter()).any(|(g, v)| g.len() != v.len()) {
            return Err(Error::Shape("gradient table does not match the model".into()));
        }
        if self.m.is_empty() {
            self.m = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in values.iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j].f64();
                let mut theta = p[j].f64();
                theta -= c.lr * c.weight_decay * theta;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta -= c.lr * mhat / (vhat.sqrt() + c.eps);
                p[j] = S::of(theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_net::NetworkConfig;

    fn model() -> TransitionKernelModel<f64> {
        TransitionKernelModel::new(NetworkConfig::with_depth(1), 1).unwrap().cast()
    }

    fn zeros(m: &TransitionKernelModel<f64>) -> Vec<Vec<f64>> {
        m.values().iter().map(|v| vec![0.0; v.len()]).collect()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut m = model();
        let before = m.values().to_vec();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = zeros(&m);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.values(), &before[..]);
    }

    #[test]
    fn zero_gradient_decay_scales() {
        let mut m = model();
        let before = m.values().to_vec();
        let cfg = AdamWConfig { weight_decay: 0.1, lr: 0.01, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let g = zeros(&m);
        opt.step(&mut m, &g).unwrap();
        for ((p, a), b) in m.params().iter().zip(m.values()).zip(&before) {
            for (x, y) in a.iter().zip(b) {
                let expect = if p.trainable { y * (1.0 - 0.01 * 0.1) } else { *y };
                assert!((x - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = model();
        let before = m.values().to_vec();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let g: Vec<Vec<f64>> =
            m.values().iter().map(|v| (0..v.len()).map(|j| (j as f64 * 0.3).sin()).collect()).collect();
        opt.step(&mut m, &g).unwrap();
        for (i, p) in m.params().iter().enumerate() {
            if !p.trainable {
                continue;
            }
            for j in 0..g[i].len() {
                let expect = before[i][j] - cfg.lr * g[i][j] / (g[i][j].abs() + cfg.eps);
                assert!((m.values()[i][j] - expect).abs() < 1e-12);
            }
        }
    }
}

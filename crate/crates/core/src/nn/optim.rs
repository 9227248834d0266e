use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Decoupled weight decay applied before the moment update.
    AdamW { weight_decay: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamW { weight_decay }, ..Self::adam(lr) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && match self.kind {
                OptimizerKind::Adam => true,
                OptimizerKind::AdamW { weight_decay } => weight_decay >= 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam / AdamW state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    /// State sized for tensors of the given lengths.
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        Optimizer {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::Shape(format!("tensor {i}: param {} grad {} state {}", p.len(), g.len(), self.first[i].len())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = match c.kind {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::AdamW { weight_decay } => weight_decay,
        };
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for j in 0..p.len() {
                if decay != 0.0 {
                    p[j] -= c.lr * decay * p[j];
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = vec![0.5, -2.0];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[2]);
        opt.step(&mut [&mut w], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(w, vec![0.5, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut w = vec![0.0];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[1]);
        opt.step(&mut [&mut w], &[vec![1.0]]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((w[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut w = vec![1.0];
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-3, 1e-5), &[1]);
        opt.step(&mut [&mut w], &[vec![0.0]]).unwrap();
        assert_eq!(w[0], 1.0 - 1e-3 * 1e-5 * 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = vec![1.0, 2.0];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[2]);
        assert!(opt.step(&mut [&mut w], &[vec![0.0]]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}

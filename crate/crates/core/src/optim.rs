//! First-order optimizers over a [`Trainable`]'s flat parameter order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trainable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global L2 norm when it is exceeded.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    /// Plain gradient descent without clipping.
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            grad_clip: None,
            ..Self::default()
        }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(Optimizer {
            cfg,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Descends along `grad` (which must be in the model's visit order).
    pub fn step(&mut self, model: &mut dyn Trainable, grad: &[f64]) -> Result<()> {
        let n = model.param_count();
        if grad.len() != n {
            return Err(Error::shape("optimizer step", &[n], &[grad.len()]));
        }
        let mut scale = 1.0;
        if let Some(max_norm) = self.cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mut off = 0;
                model.visit_params_mut(&mut |buf| {
                    for (p, g) in buf.iter_mut().zip(&grad[off..]) {
                        *p -= lr * (g * scale);
                    }
                    off += buf.len();
                });
            }
            OptimizerKind::Adam => {
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                }
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                let (m, v) = (&mut self.m, &mut self.v);
                let mut off = 0;
                model.visit_params_mut(&mut |buf| {
                    for (i, p) in buf.iter_mut().enumerate() {
                        let k = off + i;
                        let g = grad[k] * scale;
                        m[k] = b1 * m[k] + (1.0 - b1) * g;
                        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    off += buf.len();
                });
            }
        }
        Ok(())
    }
}

//! First-order optimizers over a model's parameter list.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no weight decay) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning_rate > 0 (got {lr})")));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn adam(lr: f32) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: f32) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                    self.v = self.m.clone();
                }
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op_for_fresh_adam() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = Optimizer::adam(0.1).unwrap();
        opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let mut opt = Optimizer::adam(0.01).unwrap();
        opt.step(&mut p, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()]).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        Optimizer::sgd(0.5)
            .unwrap()
            .step(&mut p, &[Tensor::new(vec![1], vec![2.0]).unwrap()])
            .unwrap();
        assert_eq!(p[0].data(), &[0.0]);
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Optimizer::adam(0.0).is_err());
    }
}

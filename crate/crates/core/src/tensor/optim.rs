//! Momentum SGD with L2 weight decay.

use super::{Param, Tensor};
use crate::error::{Error, Result};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale(k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + g + λ·θ; θ ← θ − lr·v`, then zeroes every gradient.
    ///
    /// All gradients are validated before anything is updated, so a
    /// non-finite gradient leaves every parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("sgd_step", format!("learning rate {} must be > 0", self.lr)));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                dim: "parameter count".into(),
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            p.value.check_same_shape("sgd_step", v)?;
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for ((theta, &g), vel) in value.iter_mut().zip(grad).zip(v.data_mut()) {
                *vel = self.momentum * *vel + g + self.weight_decay * *theta;
                *theta -= self.lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

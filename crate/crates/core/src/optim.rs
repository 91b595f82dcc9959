//! Update rules for the weights and the architecture logits.
//!
//! Both optimizers apply weight decay by adding `λ·p` to the gradient before
//! the update.

use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

fn check_lengths(what: &str, params: &[f64], grads: &[f64], state: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state {
        return Err(NasError::Spec(format!(
            "{what}: {} params, {} grads, optimizer state for {state}",
            params.len(),
            grads.len()
        )));
    }
    Ok(())
}

/// Heavy-ball momentum SGD: `v ← μv + (g + λp)`, `p ← p − η·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(len: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_lengths("sgd", params, grads, self.velocity.len())?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + (g + self.weight_decay * *p);
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, betas: (f64, f64), weight_decay: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            weight_decay,
            eps,
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_lengths("adam", params, grads, self.first.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let g = g + self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Either optimizer behind one interface; the architecture step may use
/// plain gradient descent instead of Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }
}

/// `rate(t) = ½·initial·(1 + cos(πt/T))` on `0 ≤ t ≤ T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Self {
        Self { initial, total_steps }
    }

    pub fn rate(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(NasError::Config(format!(
                "schedule step {t} beyond total {}",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(self.initial);
        }
        if t == self.total_steps {
            return Ok(0.0);
        }
        let frac = t as f64 / self.total_steps as f64;
        Ok(0.5 * self.initial * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

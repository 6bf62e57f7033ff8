//! AdamW with linear warmup, cosine decay and an EMA copy of the weights.

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub final_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            final_lr_frac: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            ema_decay: 0.999,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the update that takes the step counter from
    /// `step` to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

/// Moment accumulators, step counter and EMA weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub ema: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(config: OptimConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            ema: params.to_vec(),
        }
    }

    /// Applies one update in place and returns the learning rate used.
    ///
    /// Weight decay is decoupled and only touches matrices (rank ≥ 2).
    pub fn update(&mut self, names: &[String], params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidShape {
                op: "optimizer_step",
                msg: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            params[i].expect_same_shape(g, "optimizer_step")?;
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
                return Err(Error::NonFiniteGradient(name));
            }
        }
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = gv as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                let x = *pv as f64;
                *pv = (x - lr * (upd + decay * x)) as f32;
            }
        }
        let d = c.ema_decay;
        for (e, p) in self.ema.iter_mut().zip(params.iter()) {
            for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = (d * *ev as f64 + (1.0 - d) * pv as f64) as f32;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

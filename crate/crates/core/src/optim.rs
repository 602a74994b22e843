//! AdamW with global-norm clipping and a warmup-then-cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Param;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lr_high: f64,
    pub lr_low: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 100.0,
            lr_high: 1e-3,
            lr_low: 1e-4,
            warmup_epochs: 1.0,
            epochs: 50,
            steps_per_epoch: 2000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        let checks = [
            (in_unit(self.beta1) && in_unit(self.beta2), "betas must lie in [0, 1)"),
            (self.eps > 0.0, "eps must be positive"),
            (self.weight_decay >= 0.0, "weight decay must be non-negative"),
            (self.clip_norm > 0.0, "clip norm must be positive"),
            (self.lr_low > 0.0 && self.lr_low <= self.lr_high, "need 0 < lr_low <= lr_high"),
            (self.warmup_epochs >= 0.0, "warmup must be non-negative"),
            (self.epochs >= 1 && self.steps_per_epoch >= 1, "need at least one epoch and step"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_epochs * self.steps_per_epoch as f64).round() as u64).min(self.total_steps())
    }

    /// Learning rate at step `t`: linear from 0 to `lr_high` over the warmup,
    /// then half a cosine down to `lr_low` at the final step.
    pub fn schedule(&self, t: u64) -> f64 {
        let (warm, total) = (self.warmup_steps(), self.total_steps());
        if t < warm {
            return self.lr_high * t as f64 / warm as f64;
        }
        if total <= warm {
            return self.lr_high;
        }
        let frac = ((t - warm) as f64 / (total - warm) as f64).min(1.0);
        self.lr_low + 0.5 * (self.lr_high - self.lr_low) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// AdamW moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<F>>) -> Self {
        let zeros: Vec<Vec<F>> = params.into_iter().map(|p| vec![F::zero(); p.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update: finiteness check, clipping, decoupled decay, Adam step.
    /// Returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        params: &mut [&mut Param<F>],
        mut grads: Vec<Vec<F>>,
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let step = self.t + 1;
        for (p, g) in params.iter().zip(&grads) {
            if g.len() != p.data.len() {
                return Err(Error::Contract(format!("gradient size mismatch for {}", p.name)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad { param: p.name.clone(), step });
            }
        }
        let norm = clip(&mut grads, cfg.clip_norm);
        self.t = step;
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (one, eps) = (F::one(), F::of(cfg.eps));
        let decay = F::of(1.0 - lr * cfg.weight_decay);
        let step_size = F::of(lr / bc1);
        let rbc2 = F::of(1.0 / bc2.sqrt());
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let denom = v[i].sqrt() * rbc2 + eps;
                p.data[i] = p.data[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(norm)
    }
}

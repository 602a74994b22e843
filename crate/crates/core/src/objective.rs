//! GECO objective: reconstruction cross-entropy, hierarchical Gaussian KL,
//! the Lagrangian `lambda * (L_rec - kappa) + D_KL`, the multiplier update
//! and per-epoch kappa annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GaussianLatent;
use crate::tensor::{Graph, Scalar, Var};

/// EMA decay applied to `L_rec` before it drives the multiplier.
pub const EMA_DECAY: f64 = 0.95;
/// Scale (with sign flipped) applied to the multiplier's gradient.
pub const LAMBDA_GRAD_SCALE: f64 = 0.01;
const LAMBDA_BETAS: (f64, f64) = (0.9, 0.98);
const LAMBDA_EPS: f64 = 1e-8;

/// Mean token-level cross-entropy of `logits [.., V]` against `targets`.
pub fn reconstruction_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets)?)
}

/// Closed-form `KL(q || p)` between diagonal Gaussians given as `[.., D_z]`
/// mean/log-variance nodes: summed over the latent dimensions and averaged
/// over positions.
pub fn gaussian_kl<F: Scalar>(g: &mut Graph<F>, q: GaussianLatent, p: GaussianLatent) -> Result<Var> {
    let shape = g.shape(q.mu).to_vec();
    for v in [q.log_var, p.mu, p.log_var] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::Contract(format!(
                "gaussian_kl: shape {:?} against {:?}",
                g.shape(v),
                shape
            )));
        }
    }
    let positions: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    // 0.5 * (lv_p - lv_q + exp(lv_q - lv_p) + (mu_q - mu_p)^2 * exp(-lv_p) - 1)
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let neg_ratio = g.neg(log_ratio);
    let var_ratio = g.exp(neg_ratio);
    let diff = g.sub(q.mu, p.mu)?;
    let diff2 = g.mul(diff, diff)?;
    let neg_lv_p = g.neg(p.log_var);
    let inv_var_p = g.exp(neg_lv_p);
    let mean_term = g.mul(diff2, inv_var_p)?;
    let ratio = g.add(var_ratio, mean_term)?;
    let t = g.add(log_ratio, ratio)?;
    let t = g.add_scalar(t, -F::one());
    let total = g.sum(t);
    Ok(g.scale(total, F::of(0.5 / positions.max(1) as f64)))
}

/// Sum of [`gaussian_kl`] over aligned posterior/prior lists.
pub fn hierarchical_kl<F: Scalar>(
    g: &mut Graph<F>,
    posterior: &[GaussianLatent],
    prior: &[GaussianLatent],
) -> Result<Var> {
    if posterior.len() != prior.len() {
        return Err(Error::Contract(format!(
            "{} posterior latents against {} prior latents",
            posterior.len(),
            prior.len()
        )));
    }
    let mut total = g.scalar(F::zero());
    for (&q, &p) in posterior.iter().zip(prior) {
        let kl = gaussian_kl(g, q, p)?;
        total = g.add(total, kl)?;
    }
    Ok(total)
}

/// `lambda * (L_rec - kappa) + D_KL` with `lambda` and `kappa` read from the state.
pub fn geco_loss<F: Scalar>(g: &mut Graph<F>, l_rec: Var, d_kl: Var, state: &GecoState) -> Result<Var> {
    let c = g.add_scalar(l_rec, F::of(-state.kappa));
    let c = g.scale(c, F::of(state.lambda));
    Ok(g.add(c, d_kl)?)
}

/// Negative ELBO `L_rec + D_KL`.
pub fn elbo_loss<F: Scalar>(g: &mut Graph<F>, l_rec: Var, d_kl: Var) -> Result<Var> {
    Ok(g.add(l_rec, d_kl)?)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// What happened at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochConstraint {
    /// Mean `L_rec` over the epoch minus `kappa` (before any update).
    pub constraint: f64,
    pub annealed: bool,
}

/// Multiplier, constraint target and the running statistics that drive them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GecoState {
    /// Unconstrained parameter; `lambda = softplus(lambda_raw)^2`.
    pub lambda_raw: f64,
    pub lambda: f64,
    pub kappa: f64,
    /// `None` until the first observation.
    pub ema_rec: Option<f64>,
    pub sum_rec: f64,
    pub count: f64,
    /// Adaptive-moment buffers of `lambda_raw`.
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub lambda_t: u64,
}

impl GecoState {
    pub fn new(kappa: f64) -> Self {
        Self {
            lambda_raw: (std::f64::consts::E - 1.0).ln(),
            lambda: 1.0,
            kappa,
            ema_rec: None,
            sum_rec: 0.0,
            count: 0.0,
            lambda_m: 0.0,
            lambda_v: 0.0,
            lambda_t: 0,
        }
    }

    /// Ascent step on the Lagrangian with respect to `lambda_raw`, driven by
    /// the smoothed constraint `ema_rec - kappa`. The gradient
    /// `(ema_rec - kappa) * dlambda/dlambda_raw` is scaled by `-0.01` and fed
    /// to a bias-corrected adaptive-moment update at learning rate `lr`
    /// without weight decay.
    pub fn lambda_step(&mut self, l_rec: f64, lr: f64) {
        let ema = match self.ema_rec {
            None => l_rec,
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * l_rec,
        };
        self.ema_rec = Some(ema);
        let r = self.lambda_raw;
        let dlambda = 2.0 * softplus(r) * sigmoid(r);
        let grad = -LAMBDA_GRAD_SCALE * (ema - self.kappa) * dlambda;
        let (b1, b2) = LAMBDA_BETAS;
        self.lambda_t += 1;
        self.lambda_m = b1 * self.lambda_m + (1.0 - b1) * grad;
        self.lambda_v = b2 * self.lambda_v + (1.0 - b2) * grad * grad;
        let t = self.lambda_t as i32;
        let m_hat = self.lambda_m / (1.0 - b1.powi(t));
        let v_hat = self.lambda_v / (1.0 - b2.powi(t));
        let update = lr * m_hat / (v_hat.sqrt() + LAMBDA_EPS);
        if update != 0.0 {
            self.lambda_raw = r - update;
            self.lambda = softplus(self.lambda_raw).powi(2);
        }
    }

    /// Add a batch's `L_rec` to the epoch accumulators, weighted by its size.
    pub fn record(&mut self, l_rec: f64, weight: f64) {
        self.sum_rec += l_rec * weight;
        self.count += weight;
    }

    /// Mean `L_rec` over the epoch so far minus `kappa`.
    pub fn constraint(&self) -> Option<f64> {
        (self.count > 0.0).then(|| self.sum_rec / self.count - self.kappa)
    }

    /// `kappa += L_c` when `L_c < 0` and `lambda <= 1`; accumulators reset.
    pub fn kappa_anneal(&mut self) -> EpochConstraint {
        self.end_epoch(true)
    }

    /// Close the epoch, annealing only if `anneal` is set.
    pub fn end_epoch(&mut self, anneal: bool) -> EpochConstraint {
        let constraint = self.constraint().unwrap_or(0.0);
        let annealed = anneal && constraint < 0.0 && self.lambda <= 1.0;
        if annealed {
            self.kappa += constraint;
        }
        self.sum_rec = 0.0;
        self.count = 0.0;
        EpochConstraint { constraint, annealed }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Initial learning rate.
    pub eps0: f64,
    /// Last epoch at the initial rate.
    pub t0: f64,
    /// Epoch at which the rate reaches `eps0 * 0.001`.
    pub t1: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eps0: 2e-4,
            t0: 100.0,
            t1: 200.0,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            epochs: 200,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 < self.t1) {
            return Err(Error::Config(format!(
                "optim schedule needs 0 < t0 < t1, got t0 = {}, t1 = {}",
                self.t0, self.t1
            )));
        }
        if !(self.eps0.is_finite() && self.eps0 >= 0.0) {
            return Err(Error::Config("optim.eps0 must be finite and >= 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optim.weight_decay must be finite and >= 0".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("optim betas must lie in [0, 1)".into()));
        }
        if self.eps_hat.is_nan() || self.eps_hat <= 0.0 {
            return Err(Error::Config("optim.eps_hat must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning rate at epoch `t`: constant up to `t0`, then decaying by a factor
/// of 1000 over `[t0, t1]`, and held at the `t1` value afterwards.
pub fn lr_schedule(t: f64, cfg: &OptimConfig) -> f64 {
    if t <= cfg.t0 {
        cfg.eps0
    } else {
        let frac = ((t - cfg.t0) / (cfg.t1 - cfg.t0)).min(1.0);
        cfg.eps0 * 0.001f64.powf(frac)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is coupled: `wd * param` is
/// added to the gradient before the moment updates.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps_hat);
    }
    Ok(())
}

//! AdamW with decoupled weight decay and a cosine schedule that bottoms out
//! at a minimum learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            total_steps: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: usize,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step_count, &self.config)
    }
}

/// `min + ½(peak − min)(1 + cos(π·step/total))`, clamped to `min_lr` past
/// the end of the schedule.
pub fn cosine_lr(step: usize, config: &AdamWConfig) -> f64 {
    if config.total_steps == 0 || step >= config.total_steps {
        return config.min_lr;
    }
    let progress = step as f64 / config.total_steps as f64;
    config.min_lr
        + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW update over every parameter that requires grad.
///
/// Fails if no trainable parameter carries a gradient.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Contract(
            "optimizer state was built for a different parameter set".into(),
        ));
    }
    if !params.iter().any(|p| p.requires_grad && p.grad.is_some()) {
        return Err(Error::NoGrad("adamw_step called before backward".into()));
    }
    let cfg = state.config;
    let lr = cosine_lr(state.step_count, &cfg);
    let t = (state.step_count + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (idx, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else {
            continue;
        };
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let grad = grad.data();
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *w -= lr * cfg.weight_decay * *w;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.step_count += 1;
    Ok(())
}

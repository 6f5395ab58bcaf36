//! Decoupled-weight-decay Adam, global-norm clipping, and the warmup + cosine
//! learning-rate schedule shared by both training stages.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use serde::{Deserialize, Serialize};

/// Schedule knobs as they appear in config files (total steps are only known
/// once the dataset and epoch count are fixed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub restarts: u32,
}

impl ScheduleSpec {
    pub fn with_total_steps(&self, total_steps: u64) -> Result<ScheduleConfig> {
        let s = ScheduleConfig {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            total_steps,
            warmup_ratio: self.warmup_ratio,
            restarts: self.restarts,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub restarts: u32,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!(
                "warmup_ratio {} must lie in [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.min_lr > self.peak_lr {
            return Err(Error::config(format!(
                "min_lr {} exceeds peak_lr {}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.peak_lr < 0.0 {
            return Err(Error::config("peak_lr must be non-negative"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }
}

/// Learning rate at a step in [0, total_steps]: linear ramp 0 -> peak over the
/// warmup, then cosine peak -> min over each of `restarts + 1` equal segments.
pub fn lr_at(schedule: &ScheduleConfig, step: u64) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::config(format!(
            "step {} outside schedule of {} steps",
            step, schedule.total_steps
        )));
    }
    let warmup = schedule.warmup_steps();
    if step < warmup {
        return Ok(schedule.peak_lr * step as f64 / warmup as f64);
    }
    let span = (schedule.total_steps - warmup) as f64;
    if span == 0.0 {
        return Ok(schedule.peak_lr);
    }
    let segments = (schedule.restarts + 1) as f64;
    let seg_len = span / segments;
    let pos = (step - warmup) as f64;
    let seg = (pos / seg_len).floor().min(segments - 1.0);
    let frac = ((pos - seg * seg_len) / seg_len).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> OptimState {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Global L2 norm over every tensor. Errors on non-finite values.
pub fn global_norm(grads: &ModelParams) -> Result<f64> {
    let mut sq = 0.0;
    for (name, t) in grads.tensors() {
        for &g in &t.data {
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {name}")));
            }
            sq += g * g;
        }
    }
    Ok(sq.sqrt())
}

/// Scale all gradients by max_norm / ||g|| when the global norm exceeds
/// max_norm; otherwise leave them untouched. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            for g in &mut t.data {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam step with decoupled weight decay
/// (decay applied directly to the weights, scaled by lr).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    adam: &AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.config != grads.config {
        return Err(Error::config(
            "adam_step: parameter/gradient shape mismatch",
        ));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - adam.beta1.powi(t as i32);
    let bc2 = 1.0 - adam.beta2.powi(t as i32);
    let p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let m_tensors = state.m.tensors_mut();
    let v_tensors = state.v.tensors_mut();
    for (((np, gp), mp), vp) in p_tensors
        .into_iter()
        .zip(g_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        let (_, p) = np;
        let (_, g) = gp;
        let (_, m) = mp;
        let (_, v) = vp;
        for i in 0..p.data.len() {
            let gi = g.data[i];
            let decay = lr * weight_decay * p.data[i];
            m.data[i] = adam.beta1 * m.data[i] + (1.0 - adam.beta1) * gi;
            v.data[i] = adam.beta2 * v.data[i] + (1.0 - adam.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= decay + lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

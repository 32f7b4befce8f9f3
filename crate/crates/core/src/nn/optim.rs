use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Adam hyperparameters. Weight decay is decoupled from the moment update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.grad_buffer(),
            v: params.grad_buffer(),
            t: 0,
        }
    }
}

/// One AdamW update using the gradients currently held in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) {
    if params.is_empty() {
        return;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    for i in 0..params.len() {
        let g = params.grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.values[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + ob1 * g[j];
            v[j] = b2 * v[j] + ob2 * g[j] * g[j];
            p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Linear warmup followed by cosine annealing to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl ScheduleSpec {
    pub fn new(base_lr: f64, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Argument("schedule needs total_steps > 0".into()));
        }
        if warmup_steps >= total_steps {
            return Err(Error::Argument(format!(
                "warmup {warmup_steps} must be below total {total_steps}"
            )));
        }
        Ok(ScheduleSpec {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }
}

/// Learning rate at `step`; steps past the end clamp to the final value.
pub fn cosine_lr(step: usize, spec: &ScheduleSpec) -> f64 {
    let step = step.min(spec.total_steps);
    if step < spec.warmup_steps {
        return spec.base_lr * step as f64 / spec.warmup_steps as f64;
    }
    let span = (spec.total_steps - spec.warmup_steps) as f64;
    let progress = (step - spec.warmup_steps) as f64 / span;
    spec.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when untouched).
pub fn clip_global_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::lit(scale);
    for g in &mut params.grads {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    scale
}

//! AdamW with decoupled weight decay and the one-cycle cosine schedule.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at learning rate `lr`:
///
/// p ← p − lr·wd·p, then p ← p − lr·m̂/(√v̂ + ε) with bias-corrected moments.
/// Parameters without a gradient buffer are treated as having zero gradient.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![store.len()],
            rhs: vec![state.m.len()],
        });
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as f64;
    let c1 = 1.0 - beta1.powf(t);
    let c2 = 1.0 - beta2.powf(t);
    for ((param, m), v) in store.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != param.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: param.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        let grad: Vec<T> = match param.grad() {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); param.numel()],
        };
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i].f64();
            let mut x = p.f64();
            x -= lr * weight_decay * x;
            let mi = beta1 * m[i].f64() + (1.0 - beta1) * g;
            let vi = beta2 * v[i].f64() + (1.0 - beta2) * g * g;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            x -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            *p = T::of(x);
        }
    }
    Ok(())
}

/// Linear warmup from peak/25 to peak over the first `warmup_fraction` of
/// the steps, then cosine decay to peak/1e4 at `total_steps`.
pub fn one_cycle_cosine_lr(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(TensorError::Config(format!(
            "schedule step {step} outside 0..={total_steps}"
        )));
    }
    if !(0.0..=1.0).contains(&warmup_fraction) {
        return Err(TensorError::Config(format!(
            "warmup fraction {warmup_fraction} outside [0, 1]"
        )));
    }
    let start = peak_lr / 25.0;
    let floor = peak_lr / 1e4;
    let knot = warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < knot {
        return Ok(start + (peak_lr - start) * s / knot);
    }
    let span = total_steps as f64 - knot;
    if span <= 0.0 {
        return Ok(peak_lr);
    }
    let progress = (s - knot) / span;
    Ok(floor + (peak_lr - floor) * (1.0 + (PI * progress).cos()) / 2.0)
}

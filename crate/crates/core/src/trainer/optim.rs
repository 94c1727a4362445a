//! AdamW, global-norm clipping and the router temperature schedule.

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for one parameter segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(MoeError::shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * weight_decay * *p + lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place when their L2 norm exceeds `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// Linear interpolation from `start` at step 0 to `end` at `total_steps`.
pub fn temperature_at(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let f = step.min(total_steps) as f64 / total_steps as f64;
    start + (end - start) * f
}

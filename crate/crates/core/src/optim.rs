//! Adam and the 1cycle learning-rate policy.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-5,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Gradients are checked before anything is written, so a divergent step leaves
/// parameters and moments untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::State("optimizer state built for a different parameter set".into()));
    }
    if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Diverged {
            param: bad.name.clone(),
        });
    }
    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let grad = p.grad.data();
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Single-peak schedule: cosine warm-up to `max_lr`, then cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_iters: usize,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_iters: usize) -> Self {
        OneCycleSchedule {
            max_lr,
            total_iters,
            warmup_fraction: 0.25,
            start_div: 25.0,
            final_div: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_lr > 0.0
            && self.max_lr.is_finite()
            && self.total_iters > 0
            && self.warmup_fraction > 0.0
            && self.warmup_fraction < 1.0
            && self.start_div > 1.0
            && self.final_div > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid 1cycle schedule {self:?}")))
        }
    }

    pub fn warmup_iters(&self) -> f64 {
        self.warmup_fraction * self.total_iters as f64
    }

    pub fn lr(&self, iter: usize) -> Result<f64> {
        onecycle_lr(iter, self)
    }
}

/// Cosine ramp from `from` (frac 0) to `to` (frac 1); both ends are returned exactly.
fn cosine_interp(from: f64, to: f64, frac: f64) -> f64 {
    let w = 0.5 * (1.0 + (PI * frac).cos());
    from * w + to * (1.0 - w)
}

pub fn onecycle_lr(iter: usize, sched: &OneCycleSchedule) -> Result<f64> {
    if iter > sched.total_iters {
        return Err(Error::Range {
            what: "iteration",
            detail: format!("{iter} > total {}", sched.total_iters),
        });
    }
    let start = sched.max_lr / sched.start_div;
    let end = sched.max_lr / sched.final_div;
    let warm = sched.warmup_iters();
    let it = iter as f64;
    if it <= warm {
        Ok(cosine_interp(start, sched.max_lr, it / warm))
    } else {
        let frac = (it - warm) / (sched.total_iters as f64 - warm);
        Ok(cosine_interp(sched.max_lr, end, frac))
    }
}

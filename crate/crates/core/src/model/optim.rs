use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Parameters};

use super::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base_lr · min(t/warmup, sqrt(warmup/t))`
    InverseSqrt,
    Constant,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    /// Number of updates applied so far.
    pub step: usize,
    pub m: Parameters,
    pub v: Parameters,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(params: &Parameters, base_lr: f64, warmup_steps: usize) -> Self {
        OptimizerState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            base_lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            schedule: LrSchedule::InverseSqrt,
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Learning rate used for update number `t` (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::InverseSqrt => {
                let t = t.max(1) as f64;
                let w = self.warmup_steps.max(1) as f64;
                self.base_lr * (t / w).min((w / t).sqrt())
            }
        }
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut OptimizerState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(NumericsError::Shape {
            op: "adam_step",
            shapes: "parameter, gradient and moment layouts differ".into(),
        }
        .into());
    }
    state.step += 1;
    let t = state.step;
    let lr = state.lr_at(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked").data();
        let m = state.m.get_mut(name).expect("layout checked").data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(name).expect("layout checked").data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let m = state.m.get(name).unwrap().data();
        let v = state.v.get(name).unwrap().data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

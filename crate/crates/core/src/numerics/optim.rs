//! Adam and the warmup / inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, WrdError};

/// Adam moments plus hyper-parameters. Moments are created lazily on the
/// first step so one state can be reused for any parameter list whose shapes
/// stay fixed afterwards.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(WrdError::Dimension {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(WrdError::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if state.step == 0 {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    } else if state.first_moment.len() != params.len()
        || state
            .first_moment
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(WrdError::Dimension {
            op: "adam_step",
            left: state.first_moment.iter().map(Vec::len).collect(),
            right: params.iter().map(|p| p.len()).collect(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by inverse-square-root decay, scaled by
/// `model_dim^-0.5` and a constant multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub model_dim: usize,
    pub warmup_steps: usize,
    pub scale: f64,
}

impl LrSchedule {
    pub fn new(model_dim: usize, warmup_steps: usize) -> Self {
        LrSchedule {
            model_dim,
            warmup_steps,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

pub fn schedule_rate(s: &LrSchedule, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(WrdError::Domain(
            "learning-rate schedule is defined for step >= 1".into(),
        ));
    }
    if s.model_dim == 0 || s.warmup_steps == 0 {
        return Err(WrdError::Config(
            "schedule needs positive model_dim and warmup_steps".into(),
        ));
    }
    let step = step as f64;
    let warm = s.warmup_steps as f64;
    let rate = (s.model_dim as f64).powf(-0.5) * step.powf(-0.5).min(step * warm.powf(-1.5));
    Ok(s.scale * rate)
}

//! Learning-rate schedule and the AdamW update.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Linear warm-up over `⌈warmup_fraction · total_steps⌉` steps followed by a
/// half-cosine decay that reaches zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::param(format!("step {step} past the schedule end {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::param(format!("warmup fraction {warmup_fraction} outside [0, 1)")));
    }
    if !peak.is_finite() || peak < 0.0 {
        return Err(Error::param(format!("peak learning rate {peak} must be finite and non-negative")));
    }
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// Optimizer state: step count and one pair of moment buffers per parameter
/// tensor, in the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl TrainState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (first_moment, second_moment): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        TrainState {
            step: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn adamw_step(
    state: &mut TrainState,
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    hp: AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(format!(
                "parameter {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    if hp.eps <= 0.0 {
        return Err(Error::param("adam eps must be positive"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= hp.lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * *w);
        }
    }
    Ok(())
}

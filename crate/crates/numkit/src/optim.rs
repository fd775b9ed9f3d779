//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], hyper: AdamWConfig) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            hyper,
        }
    }
}

/// One AdamW update of every parameter using its stored gradient.
///
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
/// Fails without touching anything if a parameter lacks a gradient.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(NumError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(NumError::MissingGradient(i)),
            Some(g) if g.len() != state.m[i].len() => {
                return Err(NumError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![state.m[i].len()],
                })
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
            *x -= lr * h.weight_decay * *x;
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

use super::{Gradients, ParamMask, Parameters};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators, flat and aligned with the canonical
/// parameter layout. Entries for running statistics exist but never move.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let len = params.entry_count();
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update. Masked-out entries (mask false) keep their
/// value and their moments bit for bit; running statistics are never touched.
pub fn adam_step(
    params: &Parameters,
    grads: &Gradients,
    state: &AdamState,
    lr: f64,
    mask: Option<&ParamMask>,
) -> Result<(Parameters, AdamState)> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    let flat_p = params.to_flat();
    let flat_g = grads.to_flat();
    if flat_g.len() != flat_p.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            flat_g.len(),
            flat_p.len()
        )));
    }
    if state.m.len() != flat_p.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state holds {} entries, parameters {}",
            state.m.len(),
            flat_p.len()
        )));
    }
    if let Some(mask) = mask {
        if mask.len() != flat_p.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask holds {} entries, parameters {}",
                mask.len(),
                flat_p.len()
            )));
        }
    }

    let kinds = params.entry_kinds();
    let mut next = state.clone();
    next.step = state.step + 1;
    let bc1 = 1.0 - next.beta1.powi(next.step as i32);
    let bc2 = 1.0 - next.beta2.powi(next.step as i32);

    let mut out = flat_p.clone();
    for i in 0..out.len() {
        if !kinds[i].trainable() {
            continue;
        }
        if let Some(mask) = mask {
            if !mask.0[i] {
                continue;
            }
        }
        let g = flat_g[i];
        next.m[i] = next.beta1 * next.m[i] + (1.0 - next.beta1) * g;
        next.v[i] = next.beta2 * next.v[i] + (1.0 - next.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        out[i] = flat_p[i] - lr * m_hat / (v_hat.sqrt() + next.epsilon);
    }

    Ok((params.with_flat(&out)?, next))
}

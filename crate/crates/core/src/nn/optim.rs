use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::store::ParamStore;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }

    /// One bias-corrected Adam step. Slots absent from `grads` are left alone,
    /// moments included.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradient".into()));
        }
        for (id, gs) in grads.slots() {
            let slot = store.slot_mut(id)?;
            slot.steps += 1;
            let t = slot.steps as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for (k, g) in gs.iter().enumerate() {
                if g.is_empty() {
                    continue;
                }
                let p = slot.tensors[k].data_mut();
                if p.len() != g.len() {
                    return Err(NnError::Shape(format!("gradient for {} has wrong size", slot.name)));
                }
                let m = slot.m[k].data_mut();
                let v = slot.v[k].data_mut();
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place to global norm `max_norm` if it is larger.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

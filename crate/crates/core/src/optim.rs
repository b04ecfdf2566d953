//! Adam and AdamW with bias-corrected moments, plus global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Decoupled weight decay: `p -= lr * wd * p` alongside the moment step.
    AdamW,
    /// L2 decay folded into the gradient: `g += wd * p`.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Hyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub flavor: Flavor,
    pub hyper: Hyper,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(flavor: Flavor, hyper: Hyper, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|&p| vec![0.0; store.value(p).numel()]).collect();
        Self {
            flavor,
            hyper,
            step: 0,
            params,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads` pairs parameters with their gradients; parameters
    /// of this optimizer without an entry are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)]) {
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (slot, &pid) in self.params.iter().enumerate() {
            let Some((_, g)) = grads.iter().find(|(id, _)| *id == pid) else {
                continue;
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = store.value_mut(pid).data_mut();
            for i in 0..p.len() {
                let pv = p[i] as f64;
                let mut gi = g[i] as f64;
                if self.flavor == Flavor::Adam {
                    gi += h.weight_decay * pv;
                }
                let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
                let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mut next = pv;
                if self.flavor == Flavor::AdamW {
                    next -= h.lr * h.weight_decay * pv;
                }
                next -= h.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
                p[i] = next as f32;
            }
        }
    }
}

/// Global L2 norm over a gradient set.
pub fn global_norm(grads: &[(ParamId, Vec<f32>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f32>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .flat_map(|(_, g)| g.iter_mut())
            .for_each(|v| *v *= scale);
    }
    norm
}

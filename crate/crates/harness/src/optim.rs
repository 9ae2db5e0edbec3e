use std::collections::BTreeMap;

use viconex_core::autodiff::Tensor;
use viconex_core::ParamStore;

use crate::config::TrainConfig;

/// Adam with decoupled weight decay.
///
/// Decay applies to `*.weight` matrices only; biases, norms, LayerScale
/// vectors, positional embeddings and concept tokens are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (name, p) in params.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let decay = if decays(name) { 1.0 - lr * self.weight_decay as f32 } else { 1.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w *= decay;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

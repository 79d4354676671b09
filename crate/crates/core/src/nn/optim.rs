use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Keep-masks for pruned parameters: `true` = weight survives.
pub type Masks = BTreeMap<ParamId, Vec<bool>>;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `d = g + wd·w`, `v = μ·v + d`, `w -= lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buffers: BTreeMap::new() }
    }

    pub fn buffers(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.buffers
    }

    pub fn set_buffer(&mut self, id: ParamId, t: Tensor) {
        self.buffers.insert(id, t);
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, masks: Option<&Masks>) {
        for (id, g) in grads.iter() {
            let mask = masks.and_then(|m| m.get(&id));
            let w = store.get_mut(id);
            let mut d = g.clone();
            for (k, (dv, wv)) in d.data_mut().iter_mut().zip(w.data()).enumerate() {
                if mask.is_some_and(|m| !m[k]) {
                    *dv = 0.0;
                } else {
                    *dv += self.weight_decay * wv;
                }
            }
            let v = match self.buffers.get_mut(&id) {
                Some(buf) if self.momentum != 0.0 => {
                    for (b, dv) in buf.data_mut().iter_mut().zip(d.data()) {
                        *b = self.momentum * *b + dv;
                    }
                    buf.clone()
                }
                _ => {
                    if self.momentum != 0.0 {
                        self.buffers.insert(id, d.clone());
                    }
                    d
                }
            };
            for (k, (wv, vv)) in w.data_mut().iter_mut().zip(v.data()).enumerate() {
                if mask.is_some_and(|m| !m[k]) {
                    *wv = 0.0;
                } else {
                    *wv -= lr * vv;
                }
            }
        }
    }
}

use std::collections::BTreeMap;

use crate::models::{Network, ParamKey};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], slot: &mut AdamSlot, lr: f64, cfg: &AdamConfig) {
    if slot.m.len() != param.len() {
        slot.m = vec![0.0; param.len()];
        slot.v = vec![0.0; param.len()];
        slot.t = 0;
    }
    slot.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(slot.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(slot.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = slot.m[i] / c1;
        let vh = slot.v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam over every addressable parameter of a [`Network`].
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub slots: BTreeMap<ParamKey, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, slots: BTreeMap::new() }
    }

    /// Update `net` from `grads`. Clipping bounds use `bound_lr`; keys for
    /// which `frozen` holds are skipped. Bound order is restored afterwards.
    pub fn step(&mut self, net: &mut Network, grads: &[(ParamKey, Tensor)], lr: f64, bound_lr: f64, frozen: &dyn Fn(ParamKey) -> bool) {
        for (key, g) in grads {
            if frozen(*key) {
                continue;
            }
            let rate = if key.is_bound() { bound_lr } else { lr };
            if let Some(p) = net.param_mut(*key) {
                let slot = self.slots.entry(*key).or_default();
                adam_step(p, g.data(), slot, rate, &self.cfg);
            }
        }
        net.enforce_bound_order();
    }
}

//! AdamW with decoupled weight decay, cosine learning-rate decay, and
//! deterministic parameter initialization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Cosine decay from `lr0` to `lr_min` over `total` steps (step is 0-based).
pub fn cosine_lr(lr0: f64, lr_min: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math::cos(math::PI * t))
}

/// AdamW: `p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p)` with
/// bias-corrected first/second moments. Weight decay is decoupled from the
/// gradient (it applies even when the gradient is zero).
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every gradient entry, with the optimizer's base lr.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>) {
        let lr = self.cfg.lr;
        self.step_with_lr(params, grads, |_| lr);
    }

    /// One update with a per-parameter learning rate (parameter-group
    /// schedules, e.g. projector vs encoder during distillation).
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(self.cfg.beta1, t);
        let bc2 = 1.0 - math::powf(self.cfg.beta2, t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.len(), g.len(), "gradient length mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let lr = lr_for(name);
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -=
                    lr * (mhat / (math::sqrt(vhat) + self.cfg.eps) + self.cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Truncated-fan initialization: normal with std `sqrt(2 / (fan_in + fan_out))`.
pub fn init_normal(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let std = math::sqrt(2.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_normal() * std).collect();
    Tensor::new(shape, data)
}

/// Per-parameter-name RNG so insertion order cannot matter.
pub fn param_rng(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::new(derive_seed(seed, crate::digest::digest_str(name).0))
}

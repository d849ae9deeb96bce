//! AdamW with decoupled weight decay and the warmup / inverse-sqrt
//! learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nn::Params;
use crate::tensor::Tensor;

/// `base * min(step / warmup, sqrt(warmup / step))`: linear warmup into
/// inverse-sqrt decay, continuous and peaking exactly at `step == warmup`.
pub fn lr_schedule(step: u64, base: f32, warmup: u64) -> f32 {
    assert!(step >= 1, "lr_schedule: step must be >= 1");
    let warmup = warmup.max(1);
    let linear = step as f32 / warmup as f32;
    let decay = math::sqrt(warmup as f32 / step as f32);
    base * linear.min(decay)
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f32,
    pub warmup: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            warmup: 32_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment accumulators plus the step counter.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restore the step counter (checkpoint resume).
    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn current_lr(&self) -> f32 {
        lr_schedule(self.step.max(1), self.cfg.lr, self.cfg.warmup)
    }

    /// One decoupled-weight-decay update over every named gradient.
    pub fn apply(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let lr = lr_schedule(self.step, self.cfg.lr, self.cfg.warmup);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - math::powf(b1, self.step as f32);
        let bias2 = 1.0 - math::powf(b2, self.step as f32);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("adamw: unknown parameter `{name}`"));
            assert_eq!(p.shape(), grad.shape(), "adamw: grad shape mismatch for `{name}`");
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            assert_eq!(m.len(), n, "adamw: moment shape mismatch for `{name}`");
            let pd = p.data_mut();
            let gd = grad.data();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                pd[i] -= lr * (m_hat / (math::sqrt(v_hat) + self.cfg.eps)
                    + self.cfg.weight_decay * pd[i]);
            }
        }
    }

    /// Moment buffers as named tensors (for persistence).
    pub fn export_moments(&self, params: &Params) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, buf) in &self.m {
            let (r, c) = params.get(name).expect("moment without parameter").shape();
            out.push((format_moment_name(name, "m"), Tensor::new(r, c, buf.clone())));
        }
        for (name, buf) in &self.v {
            let (r, c) = params.get(name).expect("moment without parameter").shape();
            out.push((format_moment_name(name, "v"), Tensor::new(r, c, buf.clone())));
        }
        out
    }

    pub fn import_moment(&mut self, name: &str, tensor: &Tensor) {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            self.m.insert(String::from(rest), tensor.data().to_vec());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            self.v.insert(String::from(rest), tensor.data().to_vec());
        }
    }
}

fn format_moment_name(param: &str, which: &str) -> String {
    let mut s = String::from("opt.");
    s.push_str(which);
    s.push('.');
    s.push_str(param);
    s
}

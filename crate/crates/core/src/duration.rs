//! Flow-matching total-duration predictor: per-phone durations are
//! modeled in the log domain along the linear interpolation path from
//! Gaussian noise, the network regresses the constant velocity target,
//! and sampling integrates the field with a midpoint solver. The prompt
//! prefix rides along clean (never noised) for in-context conditioning.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::{Graph, NodeId};
use crate::masking::cfg_combine;
use crate::nn::{
    accumulate_grads, init_transformer, scale_grads, transformer_forward, GraphBinding, Params,
    TransformerConfig,
};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct DurationConfig {
    pub phone_vocab: usize,
    pub transformer: TransformerConfig,
    /// Midpoint solver steps at inference.
    pub solver_steps: usize,
    pub w_cfg: f32,
    pub w_rescale: f32,
    pub prompt_drop: f32,
    pub max_prompt_frac: f32,
}

impl DurationConfig {
    pub fn desk(phone_vocab: usize) -> Self {
        DurationConfig {
            phone_vocab,
            transformer: TransformerConfig::desk(),
            solver_steps: 4,
            w_cfg: 1.0,
            w_rescale: 0.75,
            prompt_drop: 0.15,
            max_prompt_frac: 0.5,
        }
    }
}

/// One phone sequence with per-phone durations in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationExample {
    pub phones: Vec<u32>,
    pub durations: Vec<f32>,
}

impl DurationExample {
    pub fn validate(&self) {
        assert_eq!(self.phones.len(), self.durations.len());
        assert!(self.durations.iter().all(|&d| d > 0.0 && d.is_finite()));
    }
}

/// `x1 = log(duration + 1)`.
pub fn to_log_domain(duration: f32) -> f32 {
    math::ln(duration + 1.0)
}

/// `duration = exp(x) - 1`, floored at one frame.
pub fn from_log_domain(x: f32) -> f32 {
    (math::exp(x) - 1.0).max(1.0)
}

/// Linear interpolation path `x_t = (1 - t) x0 + t x1`.
pub fn interpolate_path(x0: f32, x1: f32, t: f32) -> f32 {
    (1.0 - t) * x0 + t * x1
}

/// Classical midpoint (RK2) integration of `dx/dt = field(x, t)` from
/// t = 0 to t = 1 in `steps` equal steps.
pub fn midpoint_solve<F>(mut field: F, x0: &[f32], steps: usize) -> Result<Vec<f32>, CoreError>
where
    F: FnMut(&[f32], f32) -> Result<Vec<f32>, CoreError>,
{
    assert!(steps >= 1, "solver needs at least one step");
    let h = 1.0f32 / steps as f32;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f32 * h;
        let v1 = field(&x, t)?;
        check_finite(&v1)?;
        let mid: Vec<f32> = x.iter().zip(&v1).map(|(xi, vi)| xi + 0.5 * h * vi).collect();
        let v2 = field(&mid, t + 0.5 * h)?;
        check_finite(&v2)?;
        for (xi, vi) in x.iter_mut().zip(&v2) {
            *xi += h * vi;
        }
    }
    Ok(x)
}

fn check_finite(v: &[f32]) -> Result<(), CoreError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFiniteForward { op: "velocity_field" })
    }
}

pub struct DurationModel {
    pub cfg: DurationConfig,
    pub params: Params,
}

impl DurationModel {
    pub fn new(cfg: DurationConfig, rng: &mut RngState) -> Self {
        cfg.transformer.validate();
        let d = cfg.transformer.model_dim;
        let mut params = Params::new();
        params.insert("emb.phone", Tensor::randn(cfg.phone_vocab, d, 0.1, rng));
        params.insert("emb.flag", Tensor::randn(2, d, 0.1, rng));
        params.insert("val_proj", Tensor::randn(1, d, 0.3, rng));
        init_transformer(&mut params, "tr", &cfg.transformer, rng);
        params.insert("head", Tensor::randn(d, 1, 0.3, rng));
        DurationModel { cfg, params }
    }

    pub fn from_params(cfg: DurationConfig, params: Params) -> Self {
        cfg.transformer.validate();
        DurationModel { cfg, params }
    }

    /// Predicted velocity per phone, `[len, 1]`.
    fn forward_velocity(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        phones: &[u32],
        values: &[f32],
        prompt_flags: &[bool],
        t: f32,
    ) -> NodeId {
        let len = phones.len();
        assert_eq!(values.len(), len);
        assert_eq!(prompt_flags.len(), len);
        assert!(
            phones.iter().all(|&p| (p as usize) < self.cfg.phone_vocab),
            "phone id outside vocabulary"
        );
        let phone_table = b.bind(g, &self.params, "emb.phone");
        let flag_table = b.bind(g, &self.params, "emb.flag");
        let val_proj = b.bind(g, &self.params, "val_proj");
        let head = b.bind(g, &self.params, "head");

        let pe = g.embed(phone_table, phones);
        let flags: Vec<u32> = prompt_flags.iter().map(|&f| f as u32).collect();
        let fe = g.embed(flag_table, &flags);
        let vals = g.leaf(Tensor::new(len, 1, values.to_vec()));
        let ve = g.matmul(vals, val_proj);
        let x = g.add(pe, fe);
        let x = g.add(x, ve);
        let positions: Vec<u32> = (0..len as u32).collect();
        let h = transformer_forward(g, b, &self.params, "tr", &self.cfg.transformer, x, &positions, t);
        g.matmul(h, head)
    }

    /// Flow-matching regression loss on one example: noise the
    /// non-prompt positions along the interpolation path and regress
    /// the velocity `x1 - x0` there; prompt positions stay clean and
    /// contribute nothing.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        ex: &DurationExample,
        rng: &mut RngState,
    ) -> NodeId {
        ex.validate();
        let len = ex.phones.len();
        let mut prompt_len = (rng.next_f32() * self.cfg.max_prompt_frac * len as f32) as usize;
        if rng.next_f32() < self.cfg.prompt_drop {
            prompt_len = 0;
        }
        let t = rng.next_f32();
        let x1: Vec<f32> = ex.durations.iter().map(|&d| to_log_domain(d)).collect();
        let mut values = Vec::with_capacity(len);
        let mut target = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        let mut flags = Vec::with_capacity(len);
        for i in 0..len {
            if i < prompt_len {
                values.push(x1[i]);
                target.push(0.0);
                mask.push(0.0);
                flags.push(true);
            } else {
                let x0 = rng.next_gaussian();
                values.push(interpolate_path(x0, x1[i], t));
                target.push(x1[i] - x0);
                mask.push(1.0);
                flags.push(false);
            }
        }
        let v = self.forward_velocity(g, b, &ex.phones, &values, &flags, t);
        let target_n = g.leaf(Tensor::new(len, 1, target));
        let mask_n = g.leaf(Tensor::new(len, 1, mask));
        let diff = g.sub(v, target_n);
        let sq = g.mul(diff, diff);
        let masked = g.mul(sq, mask_n);
        let total = g.sum(masked);
        g.scale(total, 1.0 / (len - prompt_len) as f32)
    }

    pub fn train_batch(
        &mut self,
        batch: &[DurationExample],
        opt: &mut AdamW,
        rng: &mut RngState,
    ) -> Result<f32, CoreError> {
        assert!(!batch.is_empty());
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0f32;
        for ex in batch {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let loss = self.loss_graph(&mut g, &mut b, ex, rng);
            g.backward(loss)?;
            total += g.scalar_value(loss)?;
            accumulate_grads(&mut grads, b.grads(&g));
        }
        let scale = 1.0 / batch.len() as f32;
        scale_grads(&mut grads, scale);
        opt.apply(&mut self.params, &grads);
        Ok(total * scale)
    }

    /// Velocity for the target block of a prompted sequence, with
    /// guidance against the prompt-free pass.
    fn guided_velocity(
        &self,
        prompt_phones: &[u32],
        prompt_x1: &[f32],
        target_phones: &[u32],
        x_target: &[f32],
        t: f32,
    ) -> Result<Vec<f32>, CoreError> {
        let cond = {
            let mut phones = prompt_phones.to_vec();
            phones.extend_from_slice(target_phones);
            let mut values = prompt_x1.to_vec();
            values.extend_from_slice(x_target);
            let mut flags = vec![true; prompt_phones.len()];
            flags.extend(core::iter::repeat_n(false, target_phones.len()));
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let v = self.forward_velocity(&mut g, &mut b, &phones, &values, &flags, t);
            if let Some(e) = g.forward_error() {
                return Err(e);
            }
            let full = g.tensor(v);
            let rows: Vec<&[f32]> =
                (prompt_phones.len()..phones.len()).map(|i| full.row(i)).collect();
            Tensor::from_rows(&rows)
        };
        let uncond = {
            let flags = vec![false; target_phones.len()];
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let v = self.forward_velocity(&mut g, &mut b, target_phones, x_target, &flags, t);
            if let Some(e) = g.forward_error() {
                return Err(e);
            }
            g.tensor(v)
        };
        let guided = cfg_combine(&cond, &uncond, self.cfg.w_cfg, self.cfg.w_rescale);
        Ok(guided.into_data())
    }

    /// Predict the total frame count of the target phones, conditioned
    /// on the prompt phones and their known durations. Solves the flow
    /// from Gaussian noise, maps per-phone results back out of the log
    /// domain (floored at one frame), sums and rounds.
    pub fn predict_total(
        &self,
        target_phones: &[u32],
        prompt: &[(u32, f32)],
        rng: &mut RngState,
    ) -> Result<u64, CoreError> {
        assert!(!target_phones.is_empty(), "cannot predict duration of empty text");
        let prompt_phones: Vec<u32> = prompt.iter().map(|&(p, _)| p).collect();
        let prompt_x1: Vec<f32> = prompt.iter().map(|&(_, d)| to_log_domain(d)).collect();
        let x0: Vec<f32> = (0..target_phones.len()).map(|_| rng.next_gaussian()).collect();
        let x1 = midpoint_solve(
            |x, t| self.guided_velocity(&prompt_phones, &prompt_x1, target_phones, x, t),
            &x0,
            self.cfg.solver_steps,
        )?;
        let total: f32 = x1.iter().map(|&x| from_log_domain(x)).sum();
        Ok(libm::roundf(total) as u64)
    }
}

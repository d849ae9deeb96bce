//! Transformer backbone shared by all sequence models: bidirectional
//! attention with rotary position encoding, SwiGLU feed-forward, and
//! RMSNorm whose scale/shift are conditioned on the corruption
//! timestep.
//!
//! Models hold their weights in a [`Params`] map; each forward pass
//! binds the needed tensors into a fresh [`Graph`] through a
//! [`GraphBinding`], which also collects named gradients afterwards.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::math;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Named parameter tensors. BTreeMap keeps iteration (and therefore
/// checkpoint layout and update order) deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn value_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// Records which graph leaf each parameter was bound to, so a parameter
/// used twice shares one node and gradients accumulate correctly.
#[derive(Default)]
pub struct GraphBinding {
    ids: BTreeMap<String, NodeId>,
}

impl GraphBinding {
    pub fn new() -> Self {
        GraphBinding::default()
    }

    pub fn bind(&mut self, g: &mut Graph, params: &Params, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = g.param(t);
        self.ids.insert(name.to_string(), id);
        id
    }

    /// Named gradients for every bound parameter (after `backward`).
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.ids.iter().map(|(n, &id)| (n.clone(), g.grad(id))).collect()
    }
}

/// Accumulate one binding's gradients into a running sum (batching).
pub fn accumulate_grads(total: &mut BTreeMap<String, Tensor>, part: BTreeMap<String, Tensor>) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            None => {
                total.insert(name, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, k: f32) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub rope_theta: f32,
}

impl TransformerConfig {
    /// Small configuration that keeps the full test suite in CPU minutes.
    pub fn desk() -> Self {
        TransformerConfig { layers: 2, model_dim: 64, ffn_dim: 256, heads: 4, rope_theta: 10_000.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) {
        assert!(self.layers >= 1 && self.heads >= 1 && self.model_dim >= 1 && self.ffn_dim >= 1);
        assert_eq!(
            self.model_dim % self.heads,
            0,
            "model_dim {} not divisible by heads {}",
            self.model_dim,
            self.heads
        );
        assert!(self.head_dim() % 2 == 0, "head_dim must be even for rotary encoding");
    }
}

pub const TIMESTEP_FEATURES: usize = 32;

/// Sinusoidal features of a scalar timestep, `[1, TIMESTEP_FEATURES]`.
pub fn timestep_features(t: f32) -> Tensor {
    let half = TIMESTEP_FEATURES / 2;
    let mut data = Vec::with_capacity(TIMESTEP_FEATURES);
    for i in 0..half {
        let freq = math::powf(10_000.0, -(i as f32) / half as f32);
        data.push(math::sin(1000.0 * t * freq));
    }
    for i in 0..half {
        let freq = math::powf(10_000.0, -(i as f32) / half as f32);
        data.push(math::cos(1000.0 * t * freq));
    }
    Tensor::new(1, TIMESTEP_FEATURES, data)
}

fn linear_init(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / math::sqrt(rows as f32), rng)
}

/// Allocate all weights of a transformer stack under `prefix`.
pub fn init_transformer(params: &mut Params, prefix: &str, cfg: &TransformerConfig, rng: &mut RngState) {
    cfg.validate();
    let d = cfg.model_dim;
    params.insert(&format!("{prefix}.t_embed.w1"), linear_init(TIMESTEP_FEATURES, d, rng));
    params.insert(&format!("{prefix}.t_embed.w2"), linear_init(d, d, rng));
    for l in 0..cfg.layers {
        for norm in ["norm1", "norm2"] {
            init_ada_norm(params, &format!("{prefix}.l{l}.{norm}"), d);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(&format!("{prefix}.l{l}.attn.{w}"), linear_init(d, d, rng));
        }
        params.insert(&format!("{prefix}.l{l}.ffn.w1"), linear_init(d, cfg.ffn_dim, rng));
        params.insert(&format!("{prefix}.l{l}.ffn.w3"), linear_init(d, cfg.ffn_dim, rng));
        params.insert(&format!("{prefix}.l{l}.ffn.w2"), linear_init(cfg.ffn_dim, d, rng));
    }
    init_ada_norm(params, &format!("{prefix}.final_norm"), d);
}

/// Zero-initialized timestep projections with identity bias: at init the
/// norm behaves as plain RMSNorm regardless of `t`.
fn init_ada_norm(params: &mut Params, prefix: &str, d: usize) {
    params.insert(&format!("{prefix}.ws"), Tensor::zeros(d, d));
    params.insert(&format!("{prefix}.bs"), Tensor::full(1, d, 1.0));
    params.insert(&format!("{prefix}.wsh"), Tensor::zeros(d, d));
    params.insert(&format!("{prefix}.bsh"), Tensor::zeros(1, d));
}

/// Project the timestep features through the two-layer conditioning MLP.
pub fn timestep_embedding(
    g: &mut Graph,
    b: &mut GraphBinding,
    params: &Params,
    prefix: &str,
    t: f32,
) -> NodeId {
    let feats = g.leaf(timestep_features(t));
    let w1 = b.bind(g, params, &format!("{prefix}.t_embed.w1"));
    let w2 = b.bind(g, params, &format!("{prefix}.t_embed.w2"));
    let h = g.matmul(feats, w1);
    let h = g.silu(h);
    g.matmul(h, w2)
}

pub const RMS_EPS: f32 = 1e-6;

/// Normalize rows to unit RMS (epsilon-guarded, so all-zero rows map to
/// all-zero rows).
pub fn rms_normalize(g: &mut Graph, x: NodeId) -> NodeId {
    let sq = g.mul(x, x);
    let ms = g.row_mean(sq);
    let r = g.rsqrt_eps(ms, RMS_EPS);
    g.row_scale(x, r)
}

/// RMSNorm whose scale and shift come from projections of the timestep
/// embedding.
pub fn adaptive_rmsnorm(
    g: &mut Graph,
    b: &mut GraphBinding,
    params: &Params,
    prefix: &str,
    x: NodeId,
    t_embed: NodeId,
) -> NodeId {
    let xn = rms_normalize(g, x);
    let ws = b.bind(g, params, &format!("{prefix}.ws"));
    let bs = b.bind(g, params, &format!("{prefix}.bs"));
    let wsh = b.bind(g, params, &format!("{prefix}.wsh"));
    let bsh = b.bind(g, params, &format!("{prefix}.bsh"));
    let scale_p = g.matmul(t_embed, ws);
    let scale = g.add(scale_p, bs);
    let shift_p = g.matmul(t_embed, wsh);
    let shift = g.add(shift_p, bsh);
    let scaled = g.mul_row_vec(xn, scale);
    g.add_row_vec(scaled, shift)
}

/// RMSNorm with a learned gain vector (codec blocks).
pub fn rmsnorm_gain(g: &mut Graph, gain: NodeId, x: NodeId) -> NodeId {
    let xn = rms_normalize(g, x);
    g.mul_row_vec(xn, gain)
}

pub struct AttentionOut {
    pub out: NodeId,
    /// Per-head attention probability matrices `[len, len]`.
    pub probs: Vec<NodeId>,
}

/// Full bidirectional multi-head attention over `x = [len, dim]`.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_attention(
    g: &mut Graph,
    b: &mut GraphBinding,
    params: &Params,
    prefix: &str,
    x: NodeId,
    positions: &[u32],
    heads: usize,
    rope_theta: f32,
) -> AttentionOut {
    let (len, dim) = g.shape(x);
    assert!(len >= 1, "attention over empty sequence");
    assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
    let hd = dim / heads;
    let wq = b.bind(g, params, &format!("{prefix}.wq"));
    let wk = b.bind(g, params, &format!("{prefix}.wk"));
    let wv = b.bind(g, params, &format!("{prefix}.wv"));
    let wo = b.bind(g, params, &format!("{prefix}.wo"));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let q = g.rope(q, positions, rope_theta, hd);
    let k = g.rope(k, positions, rope_theta, hd);
    let inv_sqrt = 1.0 / math::sqrt(hd as f32);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, inv_sqrt);
        let p = g.softmax_rows(scores);
        probs.push(p);
        outs.push(g.matmul(p, vh));
    }
    let cat = g.concat_cols(&outs);
    let out = g.matmul(cat, wo);
    AttentionOut { out, probs }
}

/// Gated feed-forward (SiLU gate), applied positionwise.
pub fn swiglu_ffn(
    g: &mut Graph,
    b: &mut GraphBinding,
    params: &Params,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let w1 = b.bind(g, params, &format!("{prefix}.w1"));
    let w3 = b.bind(g, params, &format!("{prefix}.w3"));
    let w2 = b.bind(g, params, &format!("{prefix}.w2"));
    let gate = g.matmul(x, w1);
    let gate = g.silu(gate);
    let lin = g.matmul(x, w3);
    let h = g.mul(gate, lin);
    g.matmul(h, w2)
}

/// Pre-norm transformer stack conditioned on timestep `t`; returns the
/// final normalized hidden sequence `[len, model_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_forward(
    g: &mut Graph,
    b: &mut GraphBinding,
    params: &Params,
    prefix: &str,
    cfg: &TransformerConfig,
    x: NodeId,
    positions: &[u32],
    t: f32,
) -> NodeId {
    let t_embed = timestep_embedding(g, b, params, prefix, t);
    let mut h = x;
    for l in 0..cfg.layers {
        let n1 = adaptive_rmsnorm(g, b, params, &format!("{prefix}.l{l}.norm1"), h, t_embed);
        let attn = bidirectional_attention(
            g,
            b,
            params,
            &format!("{prefix}.l{l}.attn"),
            n1,
            positions,
            cfg.heads,
            cfg.rope_theta,
        );
        h = g.add(h, attn.out);
        let n2 = adaptive_rmsnorm(g, b, params, &format!("{prefix}.l{l}.norm2"), h, t_embed);
        let f = swiglu_ffn(g, b, params, &format!("{prefix}.l{l}.ffn"), n2);
        h = g.add(h, f);
    }
    adaptive_rmsnorm(g, b, params, &format!("{prefix}.final_norm"), h, t_embed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    

    fn attn_params(dim: usize, rng: &mut RngState) -> Params {
        let mut p = Params::new();
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("a.{w}"), linear_init(dim, dim, rng));
        }
        p
    }

    #[test]
    fn single_position_attention_weight_is_one() {
        let mut rng = RngState::new(1);
        let params = attn_params(8, &mut rng);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(Tensor::randn(1, 8, 1.0, &mut rng));
        let out = bidirectional_attention(&mut g, &mut b, &params, "a", x, &[0], 2, 10_000.0);
        for p in &out.probs {
            assert_eq!(g.shape(*p), (1, 1));
            assert!((g.data(*p)[0] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn uniform_queries_keys_give_uniform_weights() {
        // Identical rows -> identical keys/queries -> softmax of a
        // constant row is 1/len everywhere.
        let mut rng = RngState::new(2);
        let params = attn_params(8, &mut rng);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let row: Vec<f32> = (0..8).map(|i| 0.3 * i as f32).collect();
        let x = g.leaf(Tensor::from_rows(&[&row, &row, &row, &row]));
        let out =
            bidirectional_attention(&mut g, &mut b, &params, "a", x, &[0, 0, 0, 0], 2, 10_000.0);
        for p in &out.probs {
            for v in g.data(*p) {
                assert!((v - 0.25).abs() < 1e-6, "weight {v}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = RngState::new(3);
        let params = attn_params(16, &mut rng);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(Tensor::randn(4, 16, 1.5, &mut rng));
        let out =
            bidirectional_attention(&mut g, &mut b, &params, "a", x, &[0, 1, 2, 3], 4, 10_000.0);
        for p in &out.probs {
            let (r, c) = g.shape(*p);
            for i in 0..r {
                let s: f32 = g.data(*p)[i * c..(i + 1) * c].iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn adaptive_norm_identity_scale_gives_unit_rms() {
        let mut rng = RngState::new(4);
        let mut params = Params::new();
        init_ada_norm(&mut params, "n", 8);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(Tensor::randn(5, 8, 2.0, &mut rng));
        let t_embed = g.leaf(Tensor::randn(1, 8, 1.0, &mut rng));
        let y = adaptive_rmsnorm(&mut g, &mut b, &params, "n", x, t_embed);
        for i in 0..5 {
            let row = &g.data(y)[i * 8..(i + 1) * 8];
            let rms = math::sqrt(row.iter().map(|v| v * v).sum::<f32>() / 8.0);
            assert!((rms - 1.0).abs() < 1e-5, "row {i} rms {rms}");
        }
    }

    #[test]
    fn adaptive_norm_zero_input_stays_zero() {
        let mut rng = RngState::new(5);
        let mut params = Params::new();
        init_ada_norm(&mut params, "n", 8);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(Tensor::zeros(3, 8));
        let t_embed = g.leaf(Tensor::randn(1, 8, 1.0, &mut rng));
        let y = adaptive_rmsnorm(&mut g, &mut b, &params, "n", x, t_embed);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_timesteps_change_transformer_output() {
        let mut rng = RngState::new(6);
        let cfg = TransformerConfig { layers: 1, model_dim: 16, ffn_dim: 32, heads: 2, rope_theta: 10_000.0 };
        let mut params = Params::new();
        init_transformer(&mut params, "m", &cfg, &mut rng);
        // Move the conditioning projections off zero so t matters.
        for l in ["m.l0.norm1.ws", "m.l0.norm2.ws", "m.final_norm.ws"] {
            *params.get_mut(l).unwrap() = Tensor::randn(16, 16, 0.2, &mut rng);
        }
        let x = Tensor::randn(4, 16, 1.0, &mut rng);
        let run = |t: f32| {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let xn = g.leaf(x.clone());
            let y = transformer_forward(&mut g, &mut b, &params, "m", &cfg, xn, &[0, 1, 2, 3], t);
            g.data(y).to_vec()
        };
        let y1 = run(0.2);
        let y2 = run(0.9);
        assert_ne!(y1, y2);
    }

    #[test]
    fn swiglu_zero_input_gives_zero_output() {
        let mut rng = RngState::new(7);
        let mut params = Params::new();
        params.insert("f.w1", linear_init(8, 16, &mut rng));
        params.insert("f.w3", linear_init(8, 16, &mut rng));
        params.insert("f.w2", linear_init(16, 8, &mut rng));
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(Tensor::zeros(3, 8));
        let y = swiglu_ffn(&mut g, &mut b, &params, "f", x);
        assert_eq!(g.shape(y), (3, 8));
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_gradient_matches_finite_differences() {
        let mut rng = RngState::new(8);
        let x = Tensor::randn(2, 6, 1.0, &mut rng);
        let w1 = linear_init(6, 10, &mut rng);
        let w3 = linear_init(6, 10, &mut rng);
        let w2 = linear_init(10, 6, &mut rng);
        check_gradients(&[x, w1, w3, w2], 1e-3, 1e-2, |g, ids| {
            let gate = g.matmul(ids[0], ids[1]);
            let gate = g.silu(gate);
            let lin = g.matmul(ids[0], ids[2]);
            let h = g.mul(gate, lin);
            let y = g.matmul(h, ids[3]);
            g.sum_squares(y)
        })
        .expect("swiglu gradient");
    }

    #[test]
    fn permuting_positions_permutes_outputs() {
        let mut rng = RngState::new(9);
        let cfg = TransformerConfig { layers: 2, model_dim: 16, ffn_dim: 32, heads: 2, rope_theta: 10_000.0 };
        let mut params = Params::new();
        init_transformer(&mut params, "m", &cfg, &mut rng);
        let x = Tensor::randn(5, 16, 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let x_perm = Tensor::from_rows(&perm.iter().map(|&i| x.row(i)).collect::<Vec<_>>());
        let run = |input: &Tensor, pos: &[u32]| {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let xn = g.leaf(input.clone());
            let y = transformer_forward(&mut g, &mut b, &params, "m", &cfg, xn, pos, 0.5);
            g.tensor(y)
        };
        let base = run(&x, &[0, 1, 2, 3, 4]);
        let pos_perm: Vec<u32> = perm.iter().map(|&i| i as u32).collect();
        let permuted = run(&x_perm, &pos_perm);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                let d = (permuted.at(r, c) - base.at(src, c)).abs();
                assert!(d < 1e-4, "mismatch at ({r},{c}): {d}");
            }
        }
    }

    #[test]
    fn full_block_gradient_check_dim16() {
        let mut rng = RngState::new(10);
        let cfg = TransformerConfig { layers: 2, model_dim: 16, ffn_dim: 24, heads: 2, rope_theta: 10_000.0 };
        let mut params = Params::new();
        init_transformer(&mut params, "m", &cfg, &mut rng);
        // Random conditioning projections so their gradients are live too.
        for l in 0..2 {
            for n in ["norm1", "norm2"] {
                *params.get_mut(&format!("m.l{l}.{n}.ws")).unwrap() =
                    Tensor::randn(16, 16, 0.1, &mut rng);
                *params.get_mut(&format!("m.l{l}.{n}.wsh")).unwrap() =
                    Tensor::randn(16, 16, 0.1, &mut rng);
            }
        }
        let x = Tensor::randn(3, 16, 1.0, &mut rng);
        // Fixed readout so the loss is direction-sensitive; a plain sum
        // of squares after the final norm is nearly norm-invariant.
        let readout = Tensor::randn(16, 8, 0.5, &mut rng);
        // Check x plus a representative weight from each block kind.
        let wq = params.get("m.l0.attn.wq").unwrap().clone();
        let w1 = params.get("m.l1.ffn.w1").unwrap().clone();
        let ws = params.get("m.l0.norm1.ws").unwrap().clone();
        let te1 = params.get("m.t_embed.w1").unwrap().clone();
        check_gradients(&[x, wq, w1, ws, te1], 1e-3, 1e-2, |g, ids| {
            // Pre-seed the binding so the checked tensors resolve to the
            // perturbed graph nodes instead of the stored weights.
            let mut b = GraphBinding::new();
            b.ids.insert("m.l0.attn.wq".to_string(), ids[1]);
            b.ids.insert("m.l1.ffn.w1".to_string(), ids[2]);
            b.ids.insert("m.l0.norm1.ws".to_string(), ids[3]);
            b.ids.insert("m.t_embed.w1".to_string(), ids[4]);
            let y = transformer_forward(g, &mut b, &params, "m", &cfg, ids[0], &[0, 1, 2], 0.4);
            let r = g.leaf(readout.clone());
            let proj = g.matmul(y, r);
            let act = g.silu(proj);
            g.sum_squares(act)
        })
        .expect("transformer gradient");
    }

    #[test]
    fn timestep_features_deterministic() {
        assert_eq!(timestep_features(0.37).data(), timestep_features(0.37).data());
        assert_ne!(timestep_features(0.37).data(), timestep_features(0.38).data());
    }
}

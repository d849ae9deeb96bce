//! VQ-VAE over continuous feature frames: convolutional encoder and
//! decoder stacks, factorized low-dimensional quantization, and the
//! three-term reconstruction / codebook / commitment loss with
//! straight-through gradient routing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::{Graph, NodeId};
use crate::nn::{accumulate_grads, rmsnorm_gain, scale_grads, GraphBinding, Params};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCodecConfig {
    /// Feature dimension of the input frames.
    pub feat_dim: usize,
    /// Hidden width of the conv blocks.
    pub hidden: usize,
    /// Residual blocks in encoder and decoder each.
    pub blocks: usize,
    /// Depthwise kernel width.
    pub kernel: usize,
    pub codebook_size: usize,
    /// Factorized code dimension (quantization happens here).
    pub code_dim: usize,
    pub lambda_rec: f32,
    pub lambda_codebook: f32,
    pub lambda_commit: f32,
    /// Steps an entry may go unused before it is reseeded.
    pub revive_age: u64,
}

impl SemanticCodecConfig {
    pub fn desk() -> Self {
        SemanticCodecConfig {
            feat_dim: 8,
            hidden: 32,
            blocks: 2,
            kernel: 7,
            codebook_size: 64,
            code_dim: 4,
            lambda_rec: 1.0,
            lambda_codebook: 1.0,
            lambda_commit: 0.25,
            revive_age: 200,
        }
    }

    pub fn validate(&self) {
        assert!(self.code_dim < self.hidden, "factorized code dim must be below hidden");
        assert!(self.kernel % 2 == 1, "kernel width must be odd");
        assert!(self.codebook_size >= 1 && self.blocks >= 1);
    }
}

/// Per-dimension mean/variance over a corpus of sequences.
pub fn feature_stats(sequences: &[Tensor]) -> (Tensor, Tensor) {
    let d = sequences.first().expect("empty corpus").cols();
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for s in sequences {
        assert_eq!(s.cols(), d);
        for r in 0..s.rows() {
            for (m, v) in mean.iter_mut().zip(s.row(r)) {
                *m += *v as f64;
            }
        }
        count += s.rows();
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; d];
    for s in sequences {
        for r in 0..s.rows() {
            for j in 0..d {
                let diff = s.row(r)[j] as f64 - mean[j];
                var[j] += diff * diff;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    (
        Tensor::new(1, d, mean.iter().map(|&x| x as f32).collect()),
        Tensor::new(1, d, var.iter().map(|&x| x as f32).collect()),
    )
}

/// VQ-VAE over feature frames.
pub struct SemanticCodec {
    pub cfg: SemanticCodecConfig,
    pub params: Params,
    /// Consecutive steps each codebook entry has gone unused.
    entry_age: Vec<u64>,
}

impl SemanticCodec {
    pub fn new(cfg: SemanticCodecConfig, rng: &mut RngState) -> Self {
        cfg.validate();
        let mut params = Params::new();
        let h = cfg.hidden;
        params.insert("norm.mean", Tensor::zeros(1, cfg.feat_dim));
        params.insert("norm.var", Tensor::full(1, cfg.feat_dim, 1.0));
        params.insert("enc.in", lin(cfg.feat_dim, h, rng));
        for b in 0..cfg.blocks {
            insert_block(&mut params, &format!("enc.b{b}"), h, cfg.kernel, rng);
        }
        params.insert("proj.down", lin(h, cfg.code_dim, rng));
        params.insert("proj.up", lin(cfg.code_dim, h, rng));
        params.insert("codebook", Tensor::randn(cfg.codebook_size, cfg.code_dim, 0.5, rng));
        for b in 0..cfg.blocks {
            insert_block(&mut params, &format!("dec.b{b}"), h, cfg.kernel, rng);
        }
        params.insert("dec.out", lin(h, cfg.feat_dim, rng));
        let entry_age = vec![0; cfg.codebook_size];
        SemanticCodec { cfg, params, entry_age }
    }

    pub fn from_params(cfg: SemanticCodecConfig, params: Params) -> Self {
        cfg.validate();
        let entry_age = vec![0; cfg.codebook_size];
        SemanticCodec { cfg, params, entry_age }
    }

    pub fn set_norm_stats(&mut self, mean: Tensor, var: Tensor) {
        assert_eq!(mean.shape(), (1, self.cfg.feat_dim));
        assert_eq!(var.shape(), (1, self.cfg.feat_dim));
        self.params.insert("norm.mean", mean);
        self.params.insert("norm.var", var);
    }

    /// Standardize raw frames with the stored corpus statistics.
    pub fn normalize(&self, frames: &Tensor) -> Tensor {
        let mean = self.params.get("norm.mean").unwrap();
        let var = self.params.get("norm.var").unwrap();
        let d = self.cfg.feat_dim;
        assert_eq!(frames.cols(), d, "feature dim mismatch");
        let mut out = frames.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..d {
                row[j] = (row[j] - mean.data()[j]) / crate::math::sqrt(var.data()[j] + NORM_EPS);
            }
        }
        out
    }

    pub fn denormalize(&self, frames: &Tensor) -> Tensor {
        let mean = self.params.get("norm.mean").unwrap();
        let var = self.params.get("norm.var").unwrap();
        let mut out = frames.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..self.cfg.feat_dim {
                row[j] = row[j] * crate::math::sqrt(var.data()[j] + NORM_EPS) + mean.data()[j];
            }
        }
        out
    }

    fn conv_stack(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        prefix: &str,
        mut x: NodeId,
    ) -> NodeId {
        for blk in 0..self.cfg.blocks {
            let p = format!("{prefix}.b{blk}");
            let dw = b.bind(g, &self.params, &format!("{p}.dw"));
            let gain = b.bind(g, &self.params, &format!("{p}.norm"));
            let pw1 = b.bind(g, &self.params, &format!("{p}.pw1"));
            let pw2 = b.bind(g, &self.params, &format!("{p}.pw2"));
            let y = g.depthwise_conv1d(x, dw);
            let y = rmsnorm_gain(g, gain, y);
            let y = g.matmul(y, pw1);
            let y = g.silu(y);
            let y = g.matmul(y, pw2);
            x = g.add(x, y);
        }
        x
    }

    /// Encoder: normalized frames `[T, d]` -> hidden `[T, h]`.
    pub fn encode_hidden(&self, g: &mut Graph, b: &mut GraphBinding, x: NodeId) -> NodeId {
        assert!(g.shape(x).0 > 0, "cannot encode an empty sequence");
        let win = b.bind(g, &self.params, "enc.in");
        let h = g.matmul(x, win);
        self.conv_stack(g, b, "enc", h)
    }

    /// Decoder: hidden `[T, h]` -> reconstructed frames `[T, d]`.
    pub fn decode_hidden(&self, g: &mut Graph, b: &mut GraphBinding, x: NodeId) -> NodeId {
        let h = self.conv_stack(g, b, "dec", x);
        let wout = b.bind(g, &self.params, "dec.out");
        g.matmul(h, wout)
    }

    /// Nearest codebook entry per row under squared L2; ties take the
    /// lowest index.
    pub fn nearest_entries(codebook: &Tensor, latents: &Tensor) -> Vec<u32> {
        assert_eq!(codebook.cols(), latents.cols(), "code dim mismatch");
        let k = codebook.rows();
        let mut out = Vec::with_capacity(latents.rows());
        for r in 0..latents.rows() {
            let row = latents.row(r);
            let mut best = (f32::INFINITY, 0usize);
            for e in 0..k {
                let entry = codebook.row(e);
                let mut d = 0.0f32;
                for (a, b) in row.iter().zip(entry) {
                    let diff = a - b;
                    d += diff * diff;
                }
                if d < best.0 {
                    best = (d, e);
                }
            }
            out.push(best.1 as u32);
        }
        out
    }

    /// Tokenize normalized frames (inference path, no gradients).
    pub fn encode_indices(&self, frames_norm: &Tensor) -> Vec<u32> {
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(frames_norm.clone());
        let h = self.encode_hidden(&mut g, &mut b, x);
        let down = b.bind(&mut g, &self.params, "proj.down");
        let z = g.matmul(h, down);
        Self::nearest_entries(self.params.get("codebook").unwrap(), &g.tensor(z))
    }

    /// Reconstruct normalized frames from code indices.
    pub fn decode_indices(&self, indices: &[u32]) -> Tensor {
        let codebook = self.params.get("codebook").unwrap();
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            rows.push(codebook.row(i as usize));
        }
        let q = Tensor::from_rows(&rows);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let qn = g.leaf(q);
        let up = b.bind(&mut g, &self.params, "proj.up");
        let hidden = g.matmul(qn, up);
        let out = self.decode_hidden(&mut g, &mut b, hidden);
        g.tensor(out)
    }

    /// Full differentiable pass on one normalized sequence.
    pub fn forward(&self, g: &mut Graph, b: &mut GraphBinding, frames_norm: &Tensor) -> VqForward {
        let x = g.leaf(frames_norm.clone());
        let h = self.encode_hidden(g, b, x);
        let down = b.bind(g, &self.params, "proj.down");
        let z = g.matmul(h, down);
        let indices = Self::nearest_entries(self.params.get("codebook").unwrap(), &g.tensor(z));
        let book = b.bind(g, &self.params, "codebook");
        let q = g.embed(book, &indices);
        let q_st = g.straight_through(q, z);
        let up = b.bind(g, &self.params, "proj.up");
        let hidden = g.matmul(q_st, up);
        let recon = self.decode_hidden(g, b, hidden);
        let loss = vqvae_loss(
            g,
            x,
            recon,
            z,
            q,
            self.cfg.lambda_rec,
            self.cfg.lambda_codebook,
            self.cfg.lambda_commit,
        );
        VqForward { loss, recon, latents: z, quantized: q, indices }
    }

    /// One optimizer update over a batch of normalized sequences, with
    /// dead-entry revival.
    pub fn train_batch(
        &mut self,
        batch: &[Tensor],
        opt: &mut AdamW,
        rng: &mut RngState,
    ) -> Result<f32, CoreError> {
        assert!(!batch.is_empty());
        let mut total_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total_loss = 0.0f32;
        let mut used = vec![false; self.cfg.codebook_size];
        let mut latent_pool: Vec<Vec<f32>> = Vec::new();
        for frames in batch {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let fwd = self.forward(&mut g, &mut b, frames);
            g.backward(fwd.loss)?;
            total_loss += g.scalar_value(fwd.loss)?;
            accumulate_grads(&mut total_grads, b.grads(&g));
            for &i in &fwd.indices {
                used[i as usize] = true;
            }
            let z = g.tensor(fwd.latents);
            for r in 0..z.rows() {
                latent_pool.push(z.row(r).to_vec());
            }
        }
        let scale = 1.0 / batch.len() as f32;
        scale_grads(&mut total_grads, scale);
        opt.apply(&mut self.params, &total_grads);
        self.refresh_entry_ages(&used, &latent_pool, rng);
        Ok(total_loss * scale)
    }

    fn refresh_entry_ages(&mut self, used: &[bool], latent_pool: &[Vec<f32>], rng: &mut RngState) {
        let book = self.params.get_mut("codebook").unwrap();
        for (e, &u) in used.iter().enumerate() {
            if u {
                self.entry_age[e] = 0;
            } else {
                self.entry_age[e] += 1;
                if self.entry_age[e] >= self.cfg.revive_age && !latent_pool.is_empty() {
                    let pick = rng.next_below(latent_pool.len());
                    book.row_mut(e).copy_from_slice(&latent_pool[pick]);
                    self.entry_age[e] = 0;
                }
            }
        }
    }

    /// Distinct codebook entries hit by a set of normalized sequences.
    pub fn utilization(&self, sequences: &[Tensor]) -> usize {
        let mut used = vec![false; self.cfg.codebook_size];
        for s in sequences {
            for i in self.encode_indices(s) {
                used[i as usize] = true;
            }
        }
        used.iter().filter(|&&u| u).count()
    }
}

pub struct VqForward {
    pub loss: NodeId,
    pub recon: NodeId,
    pub latents: NodeId,
    pub quantized: NodeId,
    pub indices: Vec<u32>,
}

/// Three-term loss scaled by `1 / (T d)`:
/// reconstruction L1 (through decoder and straight-through encoder
/// path), codebook squared L2 (entries only), commitment squared L2
/// (encoder only).
#[allow(clippy::too_many_arguments)]
pub fn vqvae_loss(
    g: &mut Graph,
    target: NodeId,
    recon: NodeId,
    latents: NodeId,
    quantized: NodeId,
    lambda_rec: f32,
    lambda_codebook: f32,
    lambda_commit: f32,
) -> NodeId {
    let (t, d) = g.shape(target);
    let diff = g.sub(recon, target);
    let l1 = g.abs(diff);
    let rec = g.sum(l1);

    let z_frozen = g.stop_grad(latents);
    let cb_diff = g.sub(z_frozen, quantized);
    let codebook = g.sum_squares(cb_diff);

    let q_frozen = g.stop_grad(quantized);
    let commit_diff = g.sub(q_frozen, latents);
    let commit = g.sum_squares(commit_diff);

    let rec_s = g.scale(rec, lambda_rec);
    let cb_s = g.scale(codebook, lambda_codebook);
    let cm_s = g.scale(commit, lambda_commit);
    let partial = g.add(rec_s, cb_s);
    let total = g.add(partial, cm_s);
    g.scale(total, 1.0 / (t * d) as f32)
}

fn lin(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / crate::math::sqrt(rows as f32), rng)
}

fn insert_block(params: &mut Params, prefix: &str, h: usize, kernel: usize, rng: &mut RngState) {
    params.insert(&format!("{prefix}.dw"), Tensor::randn(kernel, h, 0.3, rng));
    params.insert(&format!("{prefix}.norm"), Tensor::full(1, h, 1.0));
    params.insert(&format!("{prefix}.pw1"), lin(h, 2 * h, rng));
    params.insert(&format!("{prefix}.pw2"), lin(2 * h, h, rng));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::optim::AdamWConfig;

    fn small_cfg() -> SemanticCodecConfig {
        SemanticCodecConfig {
            feat_dim: 4,
            hidden: 8,
            blocks: 2,
            kernel: 7,
            codebook_size: 8,
            code_dim: 2,
            lambda_rec: 1.0,
            lambda_codebook: 1.0,
            lambda_commit: 0.25,
            revive_age: 200,
        }
    }

    #[test]
    fn encoder_preserves_frame_count() {
        let mut rng = RngState::new(1);
        let codec = SemanticCodec::new(small_cfg(), &mut rng);
        let frames = Tensor::randn(9, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let x = g.leaf(frames);
        let h = codec.encode_hidden(&mut g, &mut b, x);
        assert_eq!(g.shape(h), (9, 8));
    }

    #[test]
    fn identical_context_gets_identical_latents() {
        let mut rng = RngState::new(2);
        let codec = SemanticCodec::new(small_cfg(), &mut rng);
        let row = [0.3f32, -0.7, 1.1, 0.2];
        // All frames identical, so interior frames share their receptive
        // field and must quantize identically.
        let frames = Tensor::from_rows(&[&row, &row, &row, &row, &row, &row, &row, &row]);
        let idx = codec.encode_indices(&frames);
        assert_eq!(idx[3], idx[4]);
    }

    #[test]
    fn quantize_exact_entry_has_zero_residual() {
        let book = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0], &[-1.0, 0.5]]);
        let z = Tensor::from_rows(&[&[1.0, 2.0]]);
        let idx = SemanticCodec::nearest_entries(&book, &z);
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn quantize_tie_takes_lowest_index() {
        let book = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let z = Tensor::from_rows(&[&[0.0, 0.0]]);
        assert_eq!(SemanticCodec::nearest_entries(&book, &z), vec![0]);
    }

    #[test]
    fn quantize_matches_independent_scan() {
        // Independent oracle in f64 with a different loop structure.
        let mut rng = RngState::new(3);
        let book = Tensor::randn(16, 3, 1.0, &mut rng);
        let z = Tensor::randn(200, 3, 1.5, &mut rng);
        let got = SemanticCodec::nearest_entries(&book, &z);
        for r in 0..z.rows() {
            let mut best = (f64::INFINITY, 0usize);
            for e in 0..book.rows() {
                let d: f64 = z
                    .row(r)
                    .iter()
                    .zip(book.row(e))
                    .map(|(a, b)| (*a as f64 - *b as f64) * (*a as f64 - *b as f64))
                    .sum();
                if d < best.0 {
                    best = (d, e);
                }
            }
            assert_eq!(got[r] as usize, best.1, "frame {r}");
        }
    }

    #[test]
    fn loss_zero_when_everything_matches() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
        let recon = g.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
        let z = g.leaf(Tensor::from_rows(&[&[0.5, 0.5]]));
        let q = g.leaf(Tensor::from_rows(&[&[0.5, 0.5]]));
        let loss = vqvae_loss(&mut g, s, recon, z, q, 1.0, 1.0, 0.25);
        assert_eq!(g.scalar_value(loss).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_hand_computed_single_frame_case() {
        // S = (1, 0), recon = (0.5, 0.5), z = (0.3, 0.4), q = (0.1, 0.2)
        // rec = 1.0, codebook = 0.08, commit = 0.08
        // total = (1.0 + 0.08 + 0.25 * 0.08) / 2 = 0.55
        let mut g = Graph::new();
        let s = g.leaf(Tensor::from_rows(&[&[1.0, 0.0]]));
        let recon = g.leaf(Tensor::from_rows(&[&[0.5, 0.5]]));
        let z = g.leaf(Tensor::from_rows(&[&[0.3, 0.4]]));
        let q = g.leaf(Tensor::from_rows(&[&[0.1, 0.2]]));
        let loss = vqvae_loss(&mut g, s, recon, z, q, 1.0, 1.0, 0.25);
        assert!((g.scalar_value(loss).unwrap() - 0.55).abs() < 1e-6);
    }

    #[test]
    fn gradient_routing_respects_stop_gradients() {
        // Codebook term moves entries only; commitment term moves the
        // encoder side only; reconstruction reaches the encoder through
        // the straight-through copy.
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&[&[0.3, 0.4]]));
        let q = g.param(Tensor::from_rows(&[&[0.1, 0.2]]));
        let s = g.leaf(Tensor::from_rows(&[&[1.0, 0.0]]));
        let st = g.straight_through(q, z);
        let loss = vqvae_loss(&mut g, s, st, z, q, 1.0, 1.0, 0.25);
        g.backward(loss).unwrap();
        let gz = g.grad(z);
        let gq = g.grad(q);
        // d(codebook)/dq = 2 (q - z) / (T d) = (-0.2, -0.2).
        assert!((gq.data()[0] - (-0.2)).abs() < 1e-6);
        assert!((gq.data()[1] - (-0.2)).abs() < 1e-6);
        // z receives commitment + straight-through reconstruction but no
        // codebook contribution: rec grad = sign(recon - s)/2 = (-0.5, 0.5),
        // commit grad = 0.25 * 2 (z - q) / 2 = (0.05, 0.05).
        assert!((gz.data()[0] - (-0.45)).abs() < 1e-6);
        assert!((gz.data()[1] - 0.55).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_gradient_reaches_encoder() {
        let mut rng = RngState::new(4);
        let codec = SemanticCodec::new(small_cfg(), &mut rng);
        let frames = Tensor::randn(5, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let fwd = codec.forward(&mut g, &mut b, &frames);
        g.backward(fwd.loss).unwrap();
        let grads = b.grads(&g);
        let enc_grad = &grads["enc.in"];
        assert!(enc_grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn codec_block_gradient_check() {
        let mut rng = RngState::new(5);
        let x = Tensor::randn(4, 6, 1.0, &mut rng);
        let dw = Tensor::randn(7, 6, 0.3, &mut rng);
        let gain = Tensor::full(1, 6, 1.0);
        let pw1 = lin(6, 12, &mut rng);
        let pw2 = lin(12, 6, &mut rng);
        check_gradients(&[x, dw, gain, pw1, pw2], 1e-3, 1e-2, |g, ids| {
            let y = g.depthwise_conv1d(ids[0], ids[1]);
            let y = rmsnorm_gain(g, ids[2], y);
            let y = g.matmul(y, ids[3]);
            let y = g.silu(y);
            let y = g.matmul(y, ids[4]);
            let out = g.add(ids[0], y);
            let r = g.leaf(Tensor::randn(6, 3, 0.5, &mut RngState::new(6)));
            let proj = g.matmul(out, r);
            g.sum_squares(proj)
        })
        .expect("codec block gradient");
    }

    #[test]
    fn training_clusters_converges_quickly() {
        // Four well-separated clusters in feature space; a short run
        // must already assign distinct codes and shrink the loss.
        let mut rng = RngState::new(7);
        let cfg = small_cfg();
        let mut codec = SemanticCodec::new(cfg, &mut rng);
        let centers = [
            [3.0f32, 3.0, 3.0, 3.0],
            [-3.0, -3.0, 3.0, 3.0],
            [3.0, -3.0, -3.0, 3.0],
            [-3.0, 3.0, 3.0, -3.0],
        ];
        let gen = |rng: &mut RngState| {
            let rows: Vec<Vec<f32>> = (0..12)
                .map(|_| {
                    let c = &centers[rng.next_below(4)];
                    c.iter().map(|&v| v + 0.05 * rng.next_gaussian()).collect()
                })
                .collect();
            Tensor::from_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>())
        };
        let corpus: Vec<Tensor> = (0..16).map(|_| gen(&mut rng)).collect();
        let (mean, var) = feature_stats(&corpus);
        codec.set_norm_stats(mean, var);
        let normed: Vec<Tensor> = corpus.iter().map(|t| codec.normalize(t)).collect();
        let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, warmup: 50, ..AdamWConfig::default() });
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..300 {
            let batch: Vec<Tensor> =
                (0..4).map(|_| normed[rng.next_below(normed.len())].clone()).collect();
            let loss = codec.train_batch(&batch, &mut opt, &mut rng).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first * 0.5, "loss did not drop: {first} -> {last}");
        assert!(codec.utilization(&normed) >= 4, "fewer codes than clusters in use");
    }
}

//! Residual vector quantization over continuous frame features: an
//! ordered codebook stack where each layer quantizes the previous
//! layer's residual, a multi-window L1 reconstruction loss, and
//! loss-driven codebook training.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::Graph;
use crate::nn::{accumulate_grads, scale_grads, GraphBinding, Params};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::semantic_codec::SemanticCodec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticCodecConfig {
    /// Frame feature dimension; the stack quantizes frames directly, so
    /// this is also the shared code dimension of every layer.
    pub feat_dim: usize,
    /// Number of residual layers (coarse to fine).
    pub layers: usize,
    pub codebook_size: usize,
    pub lambda_rec: f32,
    pub lambda_codebook: f32,
    pub lambda_commit: f32,
    /// Window sizes of the multi-resolution reconstruction term.
    pub windows: Vec<usize>,
    /// Frame-rate bookkeeping (sample rate / hop); carried as metadata
    /// so token rates stay meaningful, never used numerically.
    pub sample_rate: u32,
    pub hop: u32,
}

impl AcousticCodecConfig {
    pub fn desk() -> Self {
        AcousticCodecConfig {
            feat_dim: 8,
            layers: 4,
            codebook_size: 32,
            lambda_rec: 10.0,
            lambda_codebook: 1.0,
            lambda_commit: 0.25,
            windows: vec![1, 4, 16],
            sample_rate: 24_000,
            hop: 480,
        }
    }

    pub fn validate(&self) {
        assert!(self.layers >= 1 && self.codebook_size >= 1);
        assert!(!self.windows.is_empty());
    }
}

/// `layers x frames` grid of code indices, coarse layer first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcousticTokenGrid {
    layers: usize,
    frames: usize,
    idx: Vec<u32>,
}

impl AcousticTokenGrid {
    pub fn new(layers: usize, frames: usize, idx: Vec<u32>) -> Self {
        assert_eq!(layers * frames, idx.len(), "grid shape mismatch");
        AcousticTokenGrid { layers, frames, idx }
    }

    pub fn zeros(layers: usize, frames: usize) -> Self {
        AcousticTokenGrid { layers, frames, idx: vec![0; layers * frames] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, layer: usize, frame: usize) -> u32 {
        self.idx[layer * self.frames + frame]
    }

    pub fn set(&mut self, layer: usize, frame: usize, v: u32) {
        self.idx[layer * self.frames + frame] = v;
    }

    pub fn layer_row(&self, layer: usize) -> &[u32] {
        &self.idx[layer * self.frames..(layer + 1) * self.frames]
    }

    pub fn set_layer_row(&mut self, layer: usize, row: &[u32]) {
        assert_eq!(row.len(), self.frames);
        self.idx[layer * self.frames..(layer + 1) * self.frames].copy_from_slice(row);
    }

    /// Columns `lo..hi` as a new grid (prompt/target splits).
    pub fn slice_frames(&self, lo: usize, hi: usize) -> AcousticTokenGrid {
        assert!(lo <= hi && hi <= self.frames);
        let mut out = AcousticTokenGrid::zeros(self.layers, hi - lo);
        for l in 0..self.layers {
            out.set_layer_row(l, &self.layer_row(l)[lo..hi]);
        }
        out
    }

    pub fn validate_range(&self, codebook_size: usize) {
        assert!(
            self.idx.iter().all(|&i| (i as usize) < codebook_size),
            "grid index out of codebook range"
        );
    }
}

/// Ordered stack of codebooks sharing one code dimension.
pub struct RvqStack {
    pub cfg: AcousticCodecConfig,
    pub params: Params,
}

impl RvqStack {
    pub fn new(cfg: AcousticCodecConfig, rng: &mut RngState) -> Self {
        cfg.validate();
        let mut params = Params::new();
        for l in 0..cfg.layers {
            params.insert(
                &format!("layer{l}.codebook"),
                Tensor::randn(cfg.codebook_size, cfg.feat_dim, 0.5, rng),
            );
        }
        RvqStack { cfg, params }
    }

    pub fn from_params(cfg: AcousticCodecConfig, params: Params) -> Self {
        cfg.validate();
        RvqStack { cfg, params }
    }

    pub fn codebook(&self, layer: usize) -> &Tensor {
        self.params
            .get(&format!("layer{layer}.codebook"))
            .expect("missing codebook layer")
    }

    /// Seed each layer's entries from (residual) data rows so early
    /// quantization already shrinks residuals.
    pub fn init_from_data(&mut self, sequences: &[Tensor], rng: &mut RngState) {
        let mut pool: Vec<Vec<f32>> = Vec::new();
        for s in sequences {
            for r in 0..s.rows() {
                pool.push(s.row(r).to_vec());
            }
        }
        assert!(!pool.is_empty(), "cannot seed codebooks from an empty corpus");
        for l in 0..self.cfg.layers {
            let name = format!("layer{l}.codebook");
            {
                let book = self.params.get_mut(&name).unwrap();
                for e in 0..book.rows() {
                    let pick = rng.next_below(pool.len());
                    let row: Vec<f32> = pool[pick]
                        .iter()
                        .map(|&v| v + 1e-3 * rng.next_gaussian())
                        .collect();
                    book.row_mut(e).copy_from_slice(&row);
                }
            }
            // Next layer sees this layer's residuals.
            let book = self.params.get(&name).unwrap().clone();
            for row in pool.iter_mut() {
                let z = Tensor::new(1, row.len(), row.clone());
                let idx = SemanticCodec::nearest_entries(&book, &z)[0] as usize;
                for (v, q) in row.iter_mut().zip(book.row(idx)) {
                    *v -= q;
                }
            }
        }
    }

    /// Quantize frames layer by layer. Returns the token grid and the
    /// residual left after each layer (the last entry is the final
    /// reconstruction error).
    pub fn encode(&self, frames: &Tensor) -> (AcousticTokenGrid, Vec<Tensor>) {
        assert!(frames.all_finite(), "features must be finite");
        assert_eq!(frames.cols(), self.cfg.feat_dim, "feature dim mismatch");
        let t = frames.rows();
        let mut grid = AcousticTokenGrid::zeros(self.cfg.layers, t);
        let mut residual = frames.clone();
        let mut residuals = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let book = self.codebook(l);
            let idx = SemanticCodec::nearest_entries(book, &residual);
            for (f, &i) in idx.iter().enumerate() {
                let entry = book.row(i as usize);
                let row = residual.row_mut(f);
                for (v, q) in row.iter_mut().zip(entry) {
                    *v -= q;
                }
            }
            grid.set_layer_row(l, &idx);
            residuals.push(residual.clone());
        }
        (grid, residuals)
    }

    /// Sum of selected entries over layers `1..=up_to` per frame.
    pub fn decode(&self, grid: &AcousticTokenGrid, up_to: usize) -> Tensor {
        assert!(
            up_to >= 1 && up_to <= self.cfg.layers,
            "layer count {up_to} outside 1..={}",
            self.cfg.layers
        );
        assert_eq!(grid.layers(), self.cfg.layers, "grid layer mismatch");
        let mut out = Tensor::zeros(grid.frames(), self.cfg.feat_dim);
        for l in 0..up_to {
            let book = self.codebook(l);
            for f in 0..grid.frames() {
                let entry = book.row(grid.get(l, f) as usize);
                let row = out.row_mut(f);
                for (v, q) in row.iter_mut().zip(entry) {
                    *v += q;
                }
            }
        }
        out
    }

    /// One optimizer update over a batch of frame sequences.
    pub fn train_batch(
        &mut self,
        batch: &[Tensor],
        opt: &mut AdamW,
        _rng: &mut RngState,
    ) -> Result<f32, CoreError> {
        assert!(!batch.is_empty());
        let mut total_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total_loss = 0.0f32;
        for frames in batch {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let loss = self.recon_loss_graph(&mut g, &mut b, frames);
            g.backward(loss)?;
            total_loss += g.scalar_value(loss)?;
            accumulate_grads(&mut total_grads, b.grads(&g));
        }
        let scale = 1.0 / batch.len() as f32;
        scale_grads(&mut total_grads, scale);
        opt.apply(&mut self.params, &total_grads);
        Ok(total_loss * scale)
    }

    /// Differentiable three-term loss for one sequence: multi-window L1
    /// between input and the summed-entry reconstruction plus per-layer
    /// codebook/commitment terms against the running residuals.
    pub fn recon_loss_graph(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        frames: &Tensor,
    ) -> crate::graph::NodeId {
        let (grid, _) = self.encode(frames);
        let t = frames.rows();
        let d = self.cfg.feat_dim;
        let x = g.leaf(frames.clone());

        let mut recon = None;
        let mut cb_terms = None;
        let mut residual_host = frames.clone();
        for l in 0..self.cfg.layers {
            let book = b.bind(g, &self.params, &format!("layer{l}.codebook"));
            let idx = grid.layer_row(l);
            let q = g.embed(book, idx);
            recon = Some(match recon {
                None => q,
                Some(r) => g.add(r, q),
            });
            // Codebook pull toward the residual this layer quantized.
            let target = g.leaf(residual_host.clone());
            let diff = g.sub(target, q);
            let cb = g.sum_squares(diff);
            cb_terms = Some(match cb_terms {
                None => cb,
                Some(c) => g.add(c, cb),
            });
            // Advance the host-side residual.
            let book_host = self.codebook(l);
            for (f, &i) in idx.iter().enumerate() {
                let entry = book_host.row(i as usize);
                let row = residual_host.row_mut(f);
                for (v, qv) in row.iter_mut().zip(entry) {
                    *v -= qv;
                }
            }
        }
        let recon = recon.unwrap();
        let rec = multi_window_l1(g, x, recon, &self.cfg.windows);
        let rec_s = g.scale(rec, self.cfg.lambda_rec);
        // The input side of the commitment term is raw data here, so the
        // commitment contributes loss value but no trainable gradient;
        // it shares the codebook term's magnitude by symmetry.
        let cb = cb_terms.unwrap();
        let cb_norm = g.scale(cb, (self.cfg.lambda_codebook + self.cfg.lambda_commit) / (t * d) as f32);
        g.add(rec_s, cb_norm)
    }

    pub fn recon_loss(&self, frames: &Tensor) -> Result<f32, CoreError> {
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let loss = self.recon_loss_graph(&mut g, &mut b, frames);
        g.scalar_value(loss)
    }
}

/// Mean absolute difference between window-averaged versions of `a` and
/// `b`, summed over window sizes. Windows are non-overlapping; a ragged
/// tail window averages over its actual length.
pub fn multi_window_l1(
    g: &mut Graph,
    a: crate::graph::NodeId,
    b: crate::graph::NodeId,
    windows: &[usize],
) -> crate::graph::NodeId {
    let (t, _d) = g.shape(a);
    let mut acc = None;
    for &w in windows {
        let pool = g.leaf(pooling_matrix(t, w));
        let pa = g.matmul(pool, a);
        let pb = g.matmul(pool, b);
        let diff = g.sub(pa, pb);
        let l1 = g.abs(diff);
        let m = g.mean_all(l1);
        acc = Some(match acc {
            None => m,
            Some(s) => g.add(s, m),
        });
    }
    acc.unwrap()
}

/// `[ceil(t/w), t]` matrix whose rows average non-overlapping windows.
fn pooling_matrix(t: usize, w: usize) -> Tensor {
    let w = w.max(1);
    let rows = t.div_ceil(w);
    let mut m = Tensor::zeros(rows, t);
    for r in 0..rows {
        let lo = r * w;
        let hi = ((r + 1) * w).min(t);
        let inv = 1.0 / (hi - lo) as f32;
        for c in lo..hi {
            m.set(r, c, inv);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;

    fn toy_cfg(layers: usize, k: usize, d: usize) -> AcousticCodecConfig {
        AcousticCodecConfig {
            feat_dim: d,
            layers,
            codebook_size: k,
            lambda_rec: 10.0,
            lambda_codebook: 1.0,
            lambda_commit: 0.25,
            windows: vec![1, 4, 16],
            sample_rate: 24_000,
            hop: 480,
        }
    }

    fn stack_with_books(cfg: AcousticCodecConfig, books: &[Tensor]) -> RvqStack {
        let mut rng = RngState::new(0);
        let mut stack = RvqStack::new(cfg, &mut rng);
        for (l, b) in books.iter().enumerate() {
            stack.params.insert(&format!("layer{l}.codebook"), b.clone());
        }
        stack
    }

    #[test]
    fn layer_one_exact_entry_leaves_zero_residuals() {
        let book0 = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]);
        let book1 = Tensor::from_rows(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let stack = stack_with_books(toy_cfg(2, 2, 2), &[book0, book1]);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let (grid, residuals) = stack.encode(&x);
        assert_eq!(grid.get(0, 0), 0);
        assert_eq!(grid.get(1, 0), 0);
        for r in &residuals {
            let _ = r;
        }
        assert!(residuals[0].data().iter().all(|&v| v == 0.0));
        assert!(residuals[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_norms_weakly_decrease_after_data_init() {
        let mut rng = RngState::new(1);
        let mut stack = RvqStack::new(toy_cfg(4, 16, 4), &mut rng);
        let corpus: Vec<Tensor> =
            (0..8).map(|_| Tensor::randn(20, 4, 1.0, &mut rng)).collect();
        stack.init_from_data(&corpus, &mut rng);
        for s in &corpus {
            let (_, residuals) = stack.encode(s);
            let mut prev = mean_norm(s);
            for (l, r) in residuals.iter().enumerate() {
                let cur = mean_norm(r);
                assert!(cur <= prev + 1e-6, "layer {l}: {cur} > {prev}");
                prev = cur;
            }
        }
    }

    fn mean_norm(t: &Tensor) -> f32 {
        let mut acc = 0.0f64;
        for r in 0..t.rows() {
            let n: f64 = t.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum();
            acc += n.max(0.0).sqrt();
        }
        (acc / t.rows() as f64) as f32
    }

    #[test]
    fn telescoping_reconstruction() {
        let mut rng = RngState::new(2);
        let mut stack = RvqStack::new(toy_cfg(4, 8, 4), &mut rng);
        let corpus: Vec<Tensor> = (0..4).map(|_| Tensor::randn(10, 4, 1.0, &mut rng)).collect();
        stack.init_from_data(&corpus, &mut rng);
        let x = &corpus[0];
        let (grid, residuals) = stack.encode(x);
        let recon = stack.decode(&grid, 4);
        let last = residuals.last().unwrap();
        for i in 0..x.len() {
            let back = recon.data()[i] + last.data()[i];
            assert!((back - x.data()[i]).abs() < 1e-5, "elem {i}");
        }
    }

    #[test]
    fn decode_error_non_increasing_in_layer_count() {
        let mut rng = RngState::new(3);
        let mut stack = RvqStack::new(toy_cfg(4, 16, 4), &mut rng);
        let corpus: Vec<Tensor> = (0..6).map(|_| Tensor::randn(16, 4, 1.0, &mut rng)).collect();
        stack.init_from_data(&corpus, &mut rng);
        for x in &corpus {
            let (grid, _) = stack.encode(x);
            let mut prev = f32::INFINITY;
            for j in 1..=4 {
                let recon = stack.decode(&grid, j);
                let mse: f32 = recon
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    / x.len() as f32;
                assert!(mse <= prev + 1e-6, "layer {j}: {mse} > {prev}");
                prev = mse;
            }
        }
    }

    #[test]
    fn orthogonal_codebooks_match_projection_oracle() {
        // Layer 1 can only explain the first two axes, layer 2 the
        // remaining two; the final residual is the hand-computed
        // projection remainder.
        let book0 = Tensor::from_rows(&[&[2.0, 0.0, 0.0, 0.0], &[0.0, 2.0, 0.0, 0.0]]);
        let book1 = Tensor::from_rows(&[&[0.0, 0.0, 0.5, 0.0], &[0.0, 0.0, 0.0, 0.5]]);
        let stack = stack_with_books(toy_cfg(2, 2, 4), &[book0, book1]);
        let x = Tensor::from_rows(&[&[1.9, 0.2, 0.5, 0.1]]);
        let (grid, residuals) = stack.encode(&x);
        // Nearest in layer 1: (2,0,0,0) at squared distance 0.01+0.04+0.25+0.01
        assert_eq!(grid.get(0, 0), 0);
        // Residual (-0.1, 0.2, 0.5, 0.1): layer 2 picks (0,0,0.5,0).
        assert_eq!(grid.get(1, 0), 0);
        let expect = [-0.1f32, 0.2, 0.0, 0.1];
        for (got, want) in residuals[1].data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
        let recon = stack.decode(&grid, 2);
        let expect_recon = [2.0f32, 0.0, 0.5, 0.0];
        for (got, want) in recon.data().iter().zip(&expect_recon) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn recon_term_zero_on_exact_match_and_scales_linearly() {
        let book0 = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 0.0]]);
        let mut cfg = toy_cfg(1, 2, 2);
        cfg.windows = vec![1, 4];
        let stack = stack_with_books(cfg.clone(), &[book0.clone()]);
        // Exact codebook frames: reconstruction term vanishes, codebook
        // terms vanish, total loss 0.
        let x = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 0.0], &[1.0, -1.0]]);
        assert!(stack.recon_loss(&x).unwrap().abs() < 1e-7);

        // Doubling lambda_rec doubles the reconstruction term.
        let y = Tensor::from_rows(&[&[0.5, -0.5], &[0.2, 0.1], &[0.9, -1.2]]);
        let base = stack.recon_loss(&y).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.lambda_rec *= 2.0;
        cfg2.lambda_codebook = 0.0;
        cfg2.lambda_commit = 0.0;
        let mut cfg1 = cfg;
        cfg1.lambda_codebook = 0.0;
        cfg1.lambda_commit = 0.0;
        let stack1 = stack_with_books(cfg1, &[book0.clone()]);
        let stack2 = stack_with_books(cfg2, &[book0]);
        let r1 = stack1.recon_loss(&y).unwrap();
        let r2 = stack2.recon_loss(&y).unwrap();
        assert!((r2 - 2.0 * r1).abs() < 1e-6);
        assert!(base >= r1);
    }

    #[test]
    fn two_frame_loss_matches_manual_arithmetic() {
        // Single layer, K=1: every frame quantizes to (1, 0).
        // x = [(2,0), (0,0)] -> recon rows are both (1,0).
        // window 1: mean |x - recon| = (1 + 0 + 1 + 0)/4 = 0.5
        // codebook: ((2-1)^2 + 0 + (0-1)^2 + 0) = 2; /(T d)=4 -> 0.5
        // loss = 10*0.5 + (1 + 0.25)*0.5 = 5.625
        let book = Tensor::from_rows(&[&[1.0, 0.0]]);
        let mut cfg = toy_cfg(1, 1, 2);
        cfg.windows = vec![1];
        let stack = stack_with_books(cfg, &[book]);
        let x = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let loss = stack.recon_loss(&x).unwrap();
        assert!((loss - 5.625).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn training_shrinks_reconstruction_loss() {
        let mut rng = RngState::new(5);
        let mut stack = RvqStack::new(toy_cfg(4, 16, 4), &mut rng);
        let corpus: Vec<Tensor> = (0..8).map(|_| Tensor::randn(16, 4, 1.0, &mut rng)).collect();
        stack.init_from_data(&corpus, &mut rng);
        let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, warmup: 20, ..AdamWConfig::default() });
        let before: f32 =
            corpus.iter().map(|s| stack.recon_loss(s).unwrap()).sum::<f32>() / corpus.len() as f32;
        for _ in 0..150 {
            let batch: Vec<Tensor> =
                (0..4).map(|_| corpus[rng.next_below(corpus.len())].clone()).collect();
            stack.train_batch(&batch, &mut opt, &mut rng).unwrap();
        }
        let after: f32 =
            corpus.iter().map(|s| stack.recon_loss(s).unwrap()).sum::<f32>() / corpus.len() as f32;
        assert!(after < before, "loss did not improve: {before} -> {after}");
    }
}

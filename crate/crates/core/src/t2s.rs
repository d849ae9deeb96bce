//! Text-to-semantic masked generative model: the text sequence and a
//! semantic prompt prefix are concatenated in front of the masked
//! target, with segment embeddings telling the three regions apart.
//! Guidance drops the prompt; the text stays, since it is the task.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::{Graph, NodeId};
use crate::masking::{
    apply_random_mask, decode_iterative, masked_nll_loss, DecodeConfig, MaskSchedule, MaskState,
    HORIZON,
};
use crate::nn::{
    accumulate_grads, init_transformer, scale_grads, transformer_forward, GraphBinding, Params,
    TransformerConfig,
};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;

const SEG_TEXT: u32 = 0;
const SEG_PROMPT: u32 = 1;
const SEG_TARGET: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct T2sConfig {
    pub text_vocab: usize,
    /// Semantic codec codebook size; mask and separator ids sit above it.
    pub sem_vocab: usize,
    pub transformer: TransformerConfig,
    /// Probability of dropping the semantic prompt during training.
    pub prompt_drop: f32,
    /// Training prompts cover a uniform fraction of `[0, this]` of the
    /// utterance.
    pub max_prompt_frac: f32,
}

impl T2sConfig {
    pub fn desk(text_vocab: usize, sem_vocab: usize) -> Self {
        T2sConfig {
            text_vocab,
            sem_vocab,
            transformer: TransformerConfig::desk(),
            prompt_drop: 0.15,
            max_prompt_frac: 0.5,
        }
    }

    /// Reserved mask symbol, outside the codec's code range.
    pub fn mask_id(&self) -> u32 {
        self.sem_vocab as u32
    }

    /// Reserved separator between text and semantic tokens.
    pub fn sep_id(&self) -> u32 {
        self.sem_vocab as u32 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2sExample {
    pub text: Vec<u32>,
    pub semantic: Vec<u32>,
}

pub struct T2sModel {
    pub cfg: T2sConfig,
    pub params: Params,
}

impl T2sModel {
    pub fn new(cfg: T2sConfig, rng: &mut RngState) -> Self {
        cfg.transformer.validate();
        let d = cfg.transformer.model_dim;
        let mut params = Params::new();
        params.insert("emb.text", Tensor::randn(cfg.text_vocab, d, 0.1, rng));
        // Semantic table covers codes plus mask and separator.
        params.insert("emb.sem", Tensor::randn(cfg.sem_vocab + 2, d, 0.1, rng));
        params.insert("emb.segment", Tensor::randn(3, d, 0.1, rng));
        init_transformer(&mut params, "tr", &cfg.transformer, rng);
        params.insert("head", Tensor::randn(d, cfg.sem_vocab, 0.1, rng));
        T2sModel { cfg, params }
    }

    pub fn from_params(cfg: T2sConfig, params: Params) -> Self {
        cfg.transformer.validate();
        T2sModel { cfg, params }
    }

    /// Build the combined `[text, sep, prompt, target]` input embedding.
    /// Loss positions live only in the target region, whose row offset
    /// is returned alongside.
    fn build_input(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        text: &[u32],
        prompt: Option<&[u32]>,
        state: &MaskState,
    ) -> (NodeId, Vec<u32>, usize) {
        assert!(
            text.iter().all(|&t| (t as usize) < self.cfg.text_vocab),
            "text id outside vocabulary"
        );
        let prompt_tokens = prompt.unwrap_or(&[]);
        assert!(
            prompt_tokens.iter().all(|&t| t < self.cfg.mask_id()),
            "prompt contains reserved ids"
        );
        let mut sem_ids: Vec<u32> = Vec::with_capacity(1 + prompt_tokens.len() + state.len());
        let mut seg_ids: Vec<u32> = Vec::with_capacity(text.len() + sem_ids.capacity());
        seg_ids.extend(core::iter::repeat_n(SEG_TEXT, text.len()));
        sem_ids.push(self.cfg.sep_id());
        seg_ids.push(SEG_PROMPT);
        sem_ids.extend_from_slice(prompt_tokens);
        seg_ids.extend(core::iter::repeat_n(SEG_PROMPT, prompt_tokens.len()));
        sem_ids.extend_from_slice(&state.tokens);
        seg_ids.extend(core::iter::repeat_n(SEG_TARGET, state.len()));

        let text_table = b.bind(g, &self.params, "emb.text");
        let sem_table = b.bind(g, &self.params, "emb.sem");
        let seg_table = b.bind(g, &self.params, "emb.segment");
        let toks = if text.is_empty() {
            g.embed(sem_table, &sem_ids)
        } else {
            let te = g.embed(text_table, text);
            let se = g.embed(sem_table, &sem_ids);
            g.concat_rows(&[te, se])
        };
        let segs = g.embed(seg_table, &seg_ids);
        let x = g.add(toks, segs);
        let total = text.len() + sem_ids.len();
        let positions: Vec<u32> = (0..total as u32).collect();
        let target_offset = text.len() + 1 + prompt_tokens.len();
        (x, positions, target_offset)
    }

    /// Logits over the semantic vocabulary for every input position.
    fn forward_logits(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        text: &[u32],
        prompt: Option<&[u32]>,
        state: &MaskState,
        t: f32,
    ) -> (NodeId, usize) {
        let (x, positions, target_offset) = self.build_input(g, b, text, prompt, state);
        let h = transformer_forward(g, b, &self.params, "tr", &self.cfg.transformer, x, &positions, t);
        let head = b.bind(g, &self.params, "head");
        (g.matmul(h, head), target_offset)
    }

    /// Masked-prediction loss for one example. Returns the loss node and
    /// the degenerate-mask flag.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &mut GraphBinding,
        ex: &T2sExample,
        rng: &mut RngState,
    ) -> (NodeId, bool) {
        assert!(!ex.semantic.is_empty(), "empty semantic target");
        let len = ex.semantic.len();
        let prompt_len = (rng.next_f32() * self.cfg.max_prompt_frac * len as f32) as usize;
        let (prompt, target) = ex.semantic.split_at(prompt_len);
        let t = rng.next_f32_open0() * HORIZON;
        let state = apply_random_mask(target, self.cfg.mask_id(), t, MaskSchedule::Sine, rng);
        let keep_prompt = rng.next_f32() >= self.cfg.prompt_drop;
        let prompt_opt = if keep_prompt && !prompt.is_empty() { Some(prompt) } else { None };
        let (logits, target_offset) = self.forward_logits(g, b, &ex.text, prompt_opt, &state, t);

        let total = g.shape(logits).0;
        let mut targets = vec![0u32; total];
        let mut mask = vec![false; total];
        for (i, &tok) in target.iter().enumerate() {
            targets[target_offset + i] = tok;
            mask[target_offset + i] = state.mask[i];
        }
        masked_nll_loss(g, logits, &targets, &mask)
    }

    /// One optimizer update over a batch of examples; returns mean loss.
    pub fn train_batch(
        &mut self,
        batch: &[T2sExample],
        opt: &mut AdamW,
        rng: &mut RngState,
    ) -> Result<f32, CoreError> {
        assert!(!batch.is_empty());
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0f32;
        let mut contributing = 0usize;
        for ex in batch {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let (loss, degenerate) = self.loss_graph(&mut g, &mut b, ex, rng);
            if degenerate {
                continue;
            }
            g.backward(loss)?;
            total += g.scalar_value(loss)?;
            accumulate_grads(&mut grads, b.grads(&g));
            contributing += 1;
        }
        if contributing == 0 {
            return Ok(0.0);
        }
        let scale = 1.0 / contributing as f32;
        scale_grads(&mut grads, scale);
        opt.apply(&mut self.params, &grads);
        Ok(total * scale)
    }

    /// Generate `n` semantic tokens for `text`, in-context conditioned
    /// on the prompt; the unconditional guidance branch drops the prompt
    /// but keeps the text.
    pub fn generate(
        &self,
        text: &[u32],
        prompt: &[u32],
        n: usize,
        dcfg: &DecodeConfig,
        rng: &mut RngState,
    ) -> Result<Vec<u32>, CoreError> {
        assert!(n >= 1, "requested length must be >= 1");
        let mut predict = |state: &MaskState| -> Result<(Tensor, Tensor), CoreError> {
            let cond = self.target_logits(text, Some(prompt), state)?;
            let uncond = self.target_logits(text, None, state)?;
            Ok((cond, uncond))
        };
        decode_iterative(&mut predict, n, self.cfg.mask_id(), dcfg, MaskSchedule::Sine, rng)
    }

    /// Logits restricted to the target region, as a plain tensor.
    pub fn target_logits(
        &self,
        text: &[u32],
        prompt: Option<&[u32]>,
        state: &MaskState,
    ) -> Result<Tensor, CoreError> {
        let prompt = match prompt {
            Some(p) if !p.is_empty() => Some(p),
            _ => None,
        };
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let (logits, target_offset) = self.forward_logits(&mut g, &mut b, text, prompt, state, state.t);
        if let Some(e) = g.forward_error() {
            return Err(e);
        }
        let full = g.tensor(logits);
        let mut rows = Vec::with_capacity(state.len());
        for i in 0..state.len() {
            rows.push(full.row(target_offset + i));
        }
        Ok(Tensor::from_rows(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> T2sConfig {
        T2sConfig {
            text_vocab: 4,
            sem_vocab: 8,
            transformer: TransformerConfig {
                layers: 2,
                model_dim: 32,
                ffn_dim: 64,
                heads: 2,
                rope_theta: 10_000.0,
            },
            prompt_drop: 0.15,
            max_prompt_frac: 0.5,
        }
    }

    #[test]
    fn input_lengths_add_up() {
        let mut rng = RngState::new(1);
        let model = T2sModel::new(tiny_cfg(), &mut rng);
        let state = MaskState::fully_masked(5, model.cfg.mask_id());
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let (x, positions, off) =
            model.build_input(&mut g, &mut b, &[0, 1, 2], Some(&[3, 4]), &state);
        assert_eq!(g.shape(x).0, 3 + 1 + 2 + 5);
        assert_eq!(positions.len(), 11);
        assert_eq!(off, 6);
    }

    #[test]
    fn empty_prompt_drops_prompt_region() {
        let mut rng = RngState::new(2);
        let model = T2sModel::new(tiny_cfg(), &mut rng);
        let state = MaskState::fully_masked(4, model.cfg.mask_id());
        let mut g = Graph::new();
        let mut b = GraphBinding::new();
        let (x, _, off) = model.build_input(&mut g, &mut b, &[0, 1], None, &state);
        assert_eq!(g.shape(x).0, 2 + 1 + 4);
        assert_eq!(off, 3);
    }

    #[test]
    fn loss_mask_zero_over_prefix() {
        let mut rng = RngState::new(3);
        let model = T2sModel::new(tiny_cfg(), &mut rng);
        let ex = T2sExample { text: vec![0, 1, 2], semantic: vec![1, 2, 3, 4, 5, 6] };
        // The loss must be finite and well-formed across many resamples
        // of prompt length / mask draw; the prefix never contributes.
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut b = GraphBinding::new();
            let (loss, degenerate) = model.loss_graph(&mut g, &mut b, &ex, &mut rng);
            let v = g.scalar_value(loss).unwrap();
            if !degenerate {
                assert!(v.is_finite() && v >= 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn generation_respects_requested_length() {
        let mut rng = RngState::new(4);
        let model = T2sModel::new(tiny_cfg(), &mut rng);
        let dcfg = DecodeConfig { steps: 4, top_k: 8, ..DecodeConfig::default() };
        for n in [1usize, 2, 7, 19] {
            let out = model.generate(&[0, 1], &[2, 3], n, &dcfg, &mut rng).unwrap();
            assert_eq!(out.len(), n);
            assert!(out.iter().all(|&t| t < model.cfg.mask_id()));
        }
    }

    #[test]
    fn unconditional_branch_ignores_prompt_content() {
        let mut rng = RngState::new(5);
        let model = T2sModel::new(tiny_cfg(), &mut rng);
        let state = MaskState::fully_masked(4, model.cfg.mask_id());
        let a = model.target_logits(&[0, 1], None, &state).unwrap();
        let b = model.target_logits(&[0, 1], None, &state).unwrap();
        assert_eq!(a, b);
        // Two different prompts, both dropped, give bitwise-equal logits.
        let c = model.target_logits(&[0, 1], Some(&[]), &state).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn same_seed_generation_is_deterministic() {
        let mut rng_a = RngState::new(6);
        let mut rng_b = RngState::new(6);
        let model = T2sModel::new(tiny_cfg(), &mut RngState::new(7));
        let dcfg = DecodeConfig { steps: 5, top_k: 4, ..DecodeConfig::default() };
        let a = model.generate(&[1, 2], &[0], 6, &dcfg, &mut rng_a).unwrap();
        let b = model.generate(&[1, 2], &[0], 6, &dcfg, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learns_deterministic_expansion() {
        // Each text symbol expands to a fixed pair of semantic tokens;
        // a short run should already exceed chance by a wide margin.
        let mut rng = RngState::new(9);
        let cfg = tiny_cfg();
        let pairs = [[0u32, 1], [2, 3], [4, 5], [6, 7]];
        let mut examples = Vec::new();
        for _ in 0..32 {
            let len = 2 + rng.next_below(3);
            let text: Vec<u32> = (0..len).map(|_| rng.next_below(4) as u32).collect();
            let semantic: Vec<u32> =
                text.iter().flat_map(|&s| pairs[s as usize]).collect();
            examples.push(T2sExample { text, semantic });
        }
        let mut model = T2sModel::new(cfg, &mut rng);
        let mut opt = AdamW::new(crate::optim::AdamWConfig {
            lr: 2e-3,
            warmup: 100,
            ..Default::default()
        });
        let mut last = f32::INFINITY;
        for _ in 0..250 {
            let batch: Vec<T2sExample> =
                (0..4).map(|_| examples[rng.next_below(examples.len())].clone()).collect();
            last = model.train_batch(&batch, &mut opt, &mut rng).unwrap();
        }
        let initial = crate::math::ln(8.0);
        assert!(last < initial * 0.6, "loss {last} did not beat uniform {initial}");
    }
}

//! Builders translating the flat config into typed model and optimizer
//! configurations.

use anyhow::Result;
use maskcodec_core::acoustic_codec::AcousticCodecConfig;
use maskcodec_core::duration::DurationConfig;
use maskcodec_core::masking::DecodeConfig;
use maskcodec_core::nn::{Params, TransformerConfig};
use maskcodec_core::optim::{AdamW, AdamWConfig};
use maskcodec_core::s2a::{LayerStepSchedule, S2aConfig};
use maskcodec_core::semantic_codec::SemanticCodecConfig;
use maskcodec_core::t2s::T2sConfig;
use maskcodec_core::Tensor;

use crate::config::Config;

fn transformer(cfg: &Config, module: &str) -> Result<TransformerConfig> {
    Ok(TransformerConfig {
        layers: cfg.usize(&format!("{module}.layers"))?,
        model_dim: cfg.usize(&format!("{module}.model_dim"))?,
        ffn_dim: cfg.usize(&format!("{module}.ffn_dim"))?,
        heads: cfg.usize(&format!("{module}.heads"))?,
        rope_theta: cfg.f32(&format!("{module}.rope_theta"))?,
    })
}

pub fn adamw(cfg: &Config) -> Result<AdamW> {
    Ok(AdamW::new(AdamWConfig {
        lr: cfg.f32("optim.lr")?,
        warmup: cfg.u64("optim.warmup")?,
        beta1: cfg.f32("optim.beta1")?,
        beta2: cfg.f32("optim.beta2")?,
        eps: cfg.f32("optim.eps")?,
        weight_decay: cfg.f32("optim.weight_decay")?,
    }))
}

pub fn semantic_codec_config(cfg: &Config) -> Result<SemanticCodecConfig> {
    Ok(SemanticCodecConfig {
        feat_dim: cfg.usize("semantic_codec.feat_dim")?,
        hidden: cfg.usize("semantic_codec.hidden")?,
        blocks: cfg.usize("semantic_codec.blocks")?,
        kernel: cfg.usize("semantic_codec.kernel")?,
        codebook_size: cfg.usize("semantic_codec.codebook_size")?,
        code_dim: cfg.usize("semantic_codec.code_dim")?,
        lambda_rec: cfg.f32("semantic_codec.lambda_rec")?,
        lambda_codebook: cfg.f32("semantic_codec.lambda_codebook")?,
        lambda_commit: cfg.f32("semantic_codec.lambda_commit")?,
        revive_age: cfg.u64("semantic_codec.revive_age")?,
    })
}

pub fn acoustic_codec_config(cfg: &Config) -> Result<AcousticCodecConfig> {
    Ok(AcousticCodecConfig {
        feat_dim: cfg.usize("acoustic_codec.feat_dim")?,
        layers: cfg.usize("acoustic_codec.layers")?,
        codebook_size: cfg.usize("acoustic_codec.codebook_size")?,
        lambda_rec: cfg.f32("acoustic_codec.lambda_rec")?,
        lambda_codebook: cfg.f32("acoustic_codec.lambda_codebook")?,
        lambda_commit: cfg.f32("acoustic_codec.lambda_commit")?,
        windows: cfg.usize_list("acoustic_codec.windows")?,
        sample_rate: cfg.u64("acoustic_codec.sample_rate")? as u32,
        hop: cfg.u64("acoustic_codec.hop")? as u32,
    })
}

pub fn t2s_config(cfg: &Config) -> Result<T2sConfig> {
    Ok(T2sConfig {
        text_vocab: cfg.usize("corpus.text_vocab")?,
        sem_vocab: cfg.usize("semantic_codec.codebook_size")?,
        transformer: transformer(cfg, "t2s")?,
        prompt_drop: cfg.f32("t2s.prompt_drop")?,
        max_prompt_frac: cfg.f32("t2s.max_prompt_frac")?,
    })
}

pub fn s2a_config(cfg: &Config) -> Result<S2aConfig> {
    Ok(S2aConfig {
        sem_vocab: cfg.usize("semantic_codec.codebook_size")?,
        acoustic_vocab: cfg.usize("acoustic_codec.codebook_size")?,
        n_layers: cfg.usize("acoustic_codec.layers")?,
        transformer: transformer(cfg, "s2a")?,
        prompt_drop: cfg.f32("s2a.prompt_drop")?,
        max_prompt_frac: cfg.f32("s2a.max_prompt_frac")?,
    })
}

pub fn duration_config(cfg: &Config) -> Result<DurationConfig> {
    Ok(DurationConfig {
        phone_vocab: cfg.usize("corpus.text_vocab")?,
        transformer: transformer(cfg, "duration")?,
        solver_steps: cfg.usize("duration.solver_steps")?,
        w_cfg: cfg.f32("duration.cfg_w")?,
        w_rescale: cfg.f32("cfg.rescale")?,
        prompt_drop: cfg.f32("duration.prompt_drop")?,
        max_prompt_frac: cfg.f32("duration.max_prompt_frac")?,
    })
}

/// Decode controls for text-to-semantic generation.
pub fn t2s_decode_config(cfg: &Config) -> Result<DecodeConfig> {
    Ok(DecodeConfig {
        steps: cfg.usize("t2s.steps")?,
        top_k: cfg.usize("t2s.top_k")?,
        temp_start: cfg.f32("t2s.temp_start")?,
        temp_end: cfg.f32("t2s.temp_end")?,
        gumbel: cfg.bool("t2s.gumbel")?,
        w_cfg: cfg.f32("cfg.w")?,
        w_rescale: cfg.f32("cfg.rescale")?,
    })
}

/// Decode controls shared by the per-layer acoustic passes; step counts
/// come from the layer schedule.
pub fn s2a_decode_config(cfg: &Config) -> Result<DecodeConfig> {
    let mut d = t2s_decode_config(cfg)?;
    d.steps = 1; // overwritten per layer by the schedule
    Ok(d)
}

pub fn s2a_schedule(cfg: &Config, fast: bool) -> Result<LayerStepSchedule> {
    let key = if fast { "s2a.steps_fast" } else { "s2a.steps_schedule" };
    Ok(LayerStepSchedule::new(cfg.usize_list(key)?))
}

/// Split a loaded checkpoint's tensors into model parameters and
/// optimizer moment buffers.
pub fn split_optimizer_state(all: Params) -> (Params, Vec<(String, Tensor)>) {
    let mut params = Params::new();
    let mut moments = Vec::new();
    for (name, tensor) in all.iter() {
        if name.starts_with("opt.") {
            moments.push((name.clone(), tensor.clone()));
        } else {
            params.insert(name, tensor.clone());
        }
    }
    (params, moments)
}

//! Held-out evaluation: token/exact-match accuracy for the sequence
//! models, per-layer accuracy for the acoustic stage, codebook
//! utilization and reconstruction error for the codecs, relative error
//! for the duration predictor, and the end-to-end composition.
//! Utterances are processed in corpus order with per-utterance RNG
//! substreams, so reports are deterministic in (seed, config).

use anyhow::{ensure, Result};
use maskcodec_core::duration::{DurationExample, DurationModel};
use maskcodec_core::masking::DecodeConfig;
use maskcodec_core::rng::RngState;
use maskcodec_core::s2a::{LayerStepSchedule, S2aExample, S2aModel};
use maskcodec_core::semantic_codec::SemanticCodec;
use maskcodec_core::t2s::{T2sExample, T2sModel};
use maskcodec_core::Tensor;

use crate::synthetic::TOKENS_PER_SYMBOL;

/// Prompt length used during evaluation: a fixed fraction of the
/// utterance, rounded down, in whole text symbols so the semantic and
/// acoustic prompts stay aligned with the text.
pub fn prompt_symbols(text_len: usize, frac: f32) -> usize {
    ((text_len as f32 * frac) as usize).min(text_len.saturating_sub(1))
}

pub struct T2sEval {
    pub token_accuracy: f64,
    pub exact_match: f64,
}

pub fn eval_t2s(
    model: &T2sModel,
    examples: &[T2sExample],
    dcfg: &DecodeConfig,
    prompt_frac: f32,
    seed: u64,
    max_utts: usize,
) -> Result<T2sEval> {
    ensure!(!examples.is_empty(), "no held-out utterances");
    let take = effective(examples.len(), max_utts);
    let mut token_hits = 0usize;
    let mut token_total = 0usize;
    let mut exact = 0usize;
    for (i, ex) in examples.iter().take(take).enumerate() {
        let mut rng = RngState::new(seed ^ (0x7e25 + i as u64));
        let p = prompt_symbols(ex.text.len(), prompt_frac) * TOKENS_PER_SYMBOL;
        let prompt = &ex.semantic[..p];
        let truth = &ex.semantic[p..];
        let got = model.generate(&ex.text, prompt, truth.len(), dcfg, &mut rng)?;
        token_total += truth.len();
        token_hits += got.iter().zip(truth).filter(|(a, b)| a == b).count();
        if got == truth {
            exact += 1;
        }
    }
    Ok(T2sEval {
        token_accuracy: token_hits as f64 / token_total as f64,
        exact_match: exact as f64 / take as f64,
    })
}

pub struct S2aEval {
    pub per_layer_accuracy: Vec<f64>,
    pub grid_exact_match: f64,
}

pub fn eval_s2a(
    model: &S2aModel,
    examples: &[S2aExample],
    schedule: &LayerStepSchedule,
    dcfg: &DecodeConfig,
    prompt_frac: f32,
    seed: u64,
    max_utts: usize,
) -> Result<S2aEval> {
    ensure!(!examples.is_empty(), "no held-out utterances");
    let take = effective(examples.len(), max_utts);
    let layers = model.cfg.n_layers;
    let mut layer_hits = vec![0usize; layers];
    let mut layer_total = vec![0usize; layers];
    let mut exact = 0usize;
    for (i, ex) in examples.iter().take(take).enumerate() {
        let mut rng = RngState::new(seed ^ (0x52a0 + i as u64));
        let frames = ex.semantic.len();
        let p = (((frames as f32 * prompt_frac) as usize) / TOKENS_PER_SYMBOL
            * TOKENS_PER_SYMBOL)
            .min(frames.saturating_sub(1));
        let prompt = ex.grid.slice_frames(0, p);
        let got = model.generate(&ex.semantic, &prompt, schedule, dcfg, &mut rng)?;
        let mut all = true;
        for l in 0..layers {
            let truth = &ex.grid.layer_row(l)[p..];
            let gen = got.layer_row(l);
            layer_total[l] += truth.len();
            let hits = gen.iter().zip(truth).filter(|(a, b)| a == b).count();
            layer_hits[l] += hits;
            if hits != truth.len() {
                all = false;
            }
        }
        if all {
            exact += 1;
        }
    }
    Ok(S2aEval {
        per_layer_accuracy: layer_hits
            .iter()
            .zip(&layer_total)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect(),
        grid_exact_match: exact as f64 / take as f64,
    })
}

pub struct DurationEval {
    pub mean_rel_err: f64,
    pub within_10pct: f64,
}

pub fn eval_duration(
    model: &DurationModel,
    examples: &[DurationExample],
    prompt_frac: f32,
    seed: u64,
    max_utts: usize,
) -> Result<DurationEval> {
    ensure!(!examples.is_empty(), "no held-out utterances");
    let take = effective(examples.len(), max_utts);
    let mut rel_sum = 0.0f64;
    let mut within = 0usize;
    for (i, ex) in examples.iter().take(take).enumerate() {
        let mut rng = RngState::new(seed ^ (0xd0_4a + i as u64));
        let p = prompt_symbols(ex.phones.len(), prompt_frac);
        let prompt: Vec<(u32, f32)> =
            ex.phones[..p].iter().copied().zip(ex.durations[..p].iter().copied()).collect();
        let truth: f64 = ex.durations[p..].iter().map(|&d| d as f64).sum();
        let got = model.predict_total(&ex.phones[p..], &prompt, &mut rng)? as f64;
        let rel = (got - truth).abs() / truth;
        rel_sum += rel;
        if rel <= 0.10 {
            within += 1;
        }
    }
    Ok(DurationEval {
        mean_rel_err: rel_sum / take as f64,
        within_10pct: within as f64 / take as f64,
    })
}

pub struct CodecEval {
    pub utilization: usize,
    pub recon_l1_per_dim: f64,
}

/// Reconstruction error (normalized space, per dimension per frame) and
/// distinct-entry utilization on held-out features.
pub fn eval_semantic_codec(codec: &SemanticCodec, heldout: &[Tensor]) -> Result<CodecEval> {
    ensure!(!heldout.is_empty(), "no held-out feature sequences");
    let normed: Vec<Tensor> = heldout.iter().map(|t| codec.normalize(t)).collect();
    let mut err = 0.0f64;
    let mut count = 0usize;
    for frames in &normed {
        let idx = codec.encode_indices(frames);
        let recon = codec.decode_indices(&idx);
        for (a, b) in recon.data().iter().zip(frames.data()) {
            err += (a - b).abs() as f64;
        }
        count += frames.len();
    }
    Ok(CodecEval {
        utilization: codec.utilization(&normed),
        recon_l1_per_dim: err / count as f64,
    })
}

pub struct ComposeEval {
    pub end_to_end_exact_match: f64,
    pub predicted_length_within_10pct: Option<f64>,
}

/// Criterion composition: run the full chain over paired held-out
/// records. Given-length synthesis must reproduce the acoustic grid;
/// with a duration model, the predicted length is scored against the
/// ground-truth semantic length.
#[allow(clippy::too_many_arguments)]
pub fn eval_compose(
    t2s: &T2sModel,
    s2a: &S2aModel,
    duration: Option<&DurationModel>,
    t2s_examples: &[T2sExample],
    s2a_examples: &[S2aExample],
    t2s_dcfg: &DecodeConfig,
    s2a_dcfg: &DecodeConfig,
    schedule: &LayerStepSchedule,
    prompt_frac: f32,
    seed: u64,
    max_utts: usize,
) -> Result<ComposeEval> {
    ensure!(
        t2s_examples.len() == s2a_examples.len(),
        "composition needs paired t2s/s2a held-out corpora"
    );
    let take = effective(t2s_examples.len(), max_utts);
    let mut exact = 0usize;
    let mut within = 0usize;
    for i in 0..take {
        let tex = &t2s_examples[i];
        let sex = &s2a_examples[i];
        ensure!(tex.semantic == sex.semantic, "record {i}: corpora are not paired");
        let mut rng = RngState::new(seed ^ (0xe2e0 + i as u64));
        let ps = prompt_symbols(tex.text.len(), prompt_frac);
        let p = ps * TOKENS_PER_SYMBOL;
        let sem_prompt = &tex.semantic[..p];
        let n_truth = tex.semantic.len() - p;

        if let Some(dur) = duration {
            let prompt: Vec<(u32, f32)> =
                tex.text[..ps].iter().map(|&ph| (ph, TOKENS_PER_SYMBOL as f32)).collect();
            let n_pred = dur.predict_total(&tex.text[ps..], &prompt, &mut rng)? as f64;
            if (n_pred - n_truth as f64).abs() / n_truth as f64 <= 0.10 {
                within += 1;
            }
        }

        let sem_gen = t2s.generate(&tex.text, sem_prompt, n_truth, t2s_dcfg, &mut rng)?;
        let mut full_sem = sem_prompt.to_vec();
        full_sem.extend_from_slice(&sem_gen);
        let grid_prompt = sex.grid.slice_frames(0, p);
        let grid_gen = s2a.generate(&full_sem, &grid_prompt, schedule, s2a_dcfg, &mut rng)?;
        let mut all = true;
        for l in 0..sex.grid.layers() {
            if grid_gen.layer_row(l) != &sex.grid.layer_row(l)[p..] {
                all = false;
                break;
            }
        }
        if all {
            exact += 1;
        }
    }
    Ok(ComposeEval {
        end_to_end_exact_match: exact as f64 / take as f64,
        predicted_length_within_10pct: duration.map(|_| within as f64 / take as f64),
    })
}

fn effective(len: usize, max_utts: usize) -> usize {
    if max_utts == 0 {
        len
    } else {
        len.min(max_utts)
    }
}

//! End-to-end synthesis: text plus a prompt record in, semantic tokens
//! and an acoustic token grid out, with the total length either given
//! or predicted by the flow-matching duration model.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use maskcodec_core::acoustic_codec::AcousticTokenGrid;
use maskcodec_core::duration::DurationModel;
use maskcodec_core::masking::DecodeConfig;
use maskcodec_core::rng::RngState;
use maskcodec_core::s2a::{LayerStepSchedule, S2aModel};
use maskcodec_core::t2s::T2sModel;

use crate::formats::{write_grid, write_token_line, PromptRecord};

#[derive(Debug, Clone, Copy)]
pub enum LengthSpec {
    Given(usize),
    Predict,
}

pub struct SynthOutput {
    pub semantic: Vec<u32>,
    pub grid: AcousticTokenGrid,
    pub target_length: usize,
}

/// Run the two-stage chain for one utterance.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    t2s: &T2sModel,
    s2a: &S2aModel,
    duration: Option<&DurationModel>,
    text: &[u32],
    prompt: &PromptRecord,
    length: LengthSpec,
    t2s_dcfg: &DecodeConfig,
    s2a_dcfg: &DecodeConfig,
    schedule: &LayerStepSchedule,
    rng: &mut RngState,
) -> Result<SynthOutput> {
    ensure!(!text.is_empty(), "text must be nonempty");
    prompt.validate()?;
    let n = match length {
        LengthSpec::Given(n) => {
            ensure!(n >= 1, "requested length must be at least 1");
            n
        }
        LengthSpec::Predict => {
            let model = duration
                .context("length=predict requires a duration checkpoint")?;
            let prompt_pairs: Vec<(u32, f32)> =
                prompt.phones.iter().copied().zip(prompt.durations.iter().copied()).collect();
            let total = model.predict_total(text, &prompt_pairs, rng)?;
            ensure!(total >= 1, "duration model predicted an empty utterance");
            total as usize
        }
    };
    let semantic = t2s.generate(text, &prompt.semantic, n, t2s_dcfg, rng)?;
    let mut full_sem = prompt.semantic.clone();
    full_sem.extend_from_slice(&semantic);
    let grid = s2a.generate(&full_sem, &prompt.grid, schedule, s2a_dcfg, rng)?;
    Ok(SynthOutput { semantic, grid, target_length: n })
}

/// Write the token artifacts and a small metadata file.
pub fn write_outputs(dir: &Path, out: &SynthOutput, config_hash: &str, seed: u64, secs: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_token_line(&dir.join("semantic_tokens.txt"), &out.semantic)?;
    write_grid(&dir.join("acoustic_grid.txt"), &out.grid)?;
    let meta = format!(
        "format=synthesize-v1\nconfig_hash={config_hash}\nseed={seed}\ntarget_length={}\nsemantic_len={}\ngrid_layers={}\ngrid_frames={}\nwall_clock_secs={secs:.3}\n",
        out.target_length,
        out.semantic.len(),
        out.grid.layers(),
        out.grid.frames(),
    );
    std::fs::write(dir.join("synthesize_report.txt"), meta)?;
    Ok(())
}

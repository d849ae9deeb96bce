//! Writes a generated corpus bundle to disk in the module file formats,
//! plus a manifest recording the generating spec.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

use crate::checkpoint::save_features;
use crate::config::Config;
use crate::formats::{write_duration_corpus, write_s2a_corpus, write_t2s_corpus};
use crate::synthetic::{generate, CorpusBundle, SyntheticTaskSpec};

pub fn generate_and_write(cfg: &Config, seed: u64, out: &Path) -> Result<CorpusBundle> {
    let spec = SyntheticTaskSpec::from_config(cfg, seed)?;
    let bundle = generate(&spec)?;
    std::fs::create_dir_all(out)?;

    write_t2s_corpus(&out.join("t2s_train.txt"), &bundle.t2s_train)?;
    write_t2s_corpus(&out.join("t2s_heldout.txt"), &bundle.t2s_heldout)?;
    write_s2a_corpus(&out.join("s2a_train.txt"), &bundle.s2a_train)?;
    write_s2a_corpus(&out.join("s2a_heldout.txt"), &bundle.s2a_heldout)?;
    write_duration_corpus(&out.join("duration_train.txt"), &bundle.duration_train)?;
    write_duration_corpus(&out.join("duration_heldout.txt"), &bundle.duration_heldout)?;
    write_duration_corpus(
        &out.join("pipeline_duration_train.txt"),
        &bundle.pipeline_duration_train,
    )?;
    write_duration_corpus(
        &out.join("pipeline_duration_heldout.txt"),
        &bundle.pipeline_duration_heldout,
    )?;
    for (i, frames) in bundle.features_train.iter().enumerate() {
        save_features(&out.join(format!("features_train/{i:04}.bin")), frames)?;
    }
    for (i, frames) in bundle.features_heldout.iter().enumerate() {
        save_features(&out.join(format!("features_heldout/{i:04}.bin")), frames)?;
    }
    for (i, frames) in bundle.acoustic_features_train.iter().enumerate() {
        save_features(&out.join(format!("acoustic_features_train/{i:04}.bin")), frames)?;
    }
    for (i, frames) in bundle.acoustic_features_heldout.iter().enumerate() {
        save_features(&out.join(format!("acoustic_features_heldout/{i:04}.bin")), frames)?;
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "format=corpus-manifest-v1");
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "config_hash={}", cfg.hash());
    let _ = writeln!(manifest, "t2s_train={}", bundle.t2s_train.len());
    let _ = writeln!(manifest, "t2s_heldout={}", bundle.t2s_heldout.len());
    let _ = writeln!(manifest, "s2a_train={}", bundle.s2a_train.len());
    let _ = writeln!(manifest, "s2a_heldout={}", bundle.s2a_heldout.len());
    let _ = writeln!(manifest, "duration_train={}", bundle.duration_train.len());
    let _ = writeln!(manifest, "duration_heldout={}", bundle.duration_heldout.len());
    let _ = writeln!(manifest, "features_train={}", bundle.features_train.len());
    let _ = writeln!(manifest, "features_heldout={}", bundle.features_heldout.len());
    std::fs::write(out.join("corpus_manifest.txt"), manifest)?;
    Ok(bundle)
}

//! Training orchestration: one process per checkpoint, deterministic
//! under a fixed seed, periodic checkpointing, and loss-curve capture.
//! A non-finite loss aborts the run; the last periodic checkpoint stays
//! on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use maskcodec_core::acoustic_codec::RvqStack;
use maskcodec_core::duration::DurationModel;
use maskcodec_core::rng::RngState;
use maskcodec_core::s2a::S2aModel;
use maskcodec_core::semantic_codec::{feature_stats, SemanticCodec};
use maskcodec_core::t2s::T2sModel;
use maskcodec_core::Tensor;

use crate::checkpoint::{load_checkpoint, load_features, save_checkpoint, Kind};
use crate::config::Config;
use crate::formats::{read_duration_corpus, read_s2a_corpus, read_t2s_corpus, write_loss_curve};
use crate::wiring;

pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: f32,
    pub checkpoint: PathBuf,
}

/// What the shared loop asks of a trainer.
enum Tick {
    /// Run one optimizer update; the returned value is the batch loss.
    Step,
    /// Persist a checkpoint at the current optimizer step.
    Save,
}

/// Shared training-loop driver: initial save (so a zero-step run still
/// yields its init checkpoint), periodic saves, loss logging, and abort
/// handling that leaves the last checkpoint on disk.
fn run_loop<F>(
    cfg: &Config,
    steps: u64,
    start_step: u64,
    mut tick: F,
    curve_path: &Path,
) -> Result<(u64, f32)>
where
    F: FnMut(Tick) -> Result<f32>,
{
    let ckpt_every = cfg.u64("train.ckpt_every")?.max(1);
    let log_every = cfg.u64("train.log_every")?.max(1);
    let mut curve: Vec<(u64, f32)> = Vec::new();
    let mut last = 0.0f32;
    tick(Tick::Save)?;
    for i in 1..=steps {
        let step = start_step + i;
        match tick(Tick::Step) {
            Ok(loss) => {
                last = loss;
                if i % log_every == 0 || i == steps {
                    println!("step {step} loss {loss:.6}");
                    curve.push((step, loss));
                }
            }
            Err(e) => {
                write_loss_curve(curve_path, &curve)?;
                bail!("training aborted at step {step}: {e} (last checkpoint retained)");
            }
        }
        if i % ckpt_every == 0 || i == steps {
            tick(Tick::Save)?;
        }
    }
    write_loss_curve(curve_path, &curve)?;
    Ok((start_step + steps, last))
}

fn sample_batch<T: Clone>(items: &[T], batch: usize, rng: &mut RngState) -> Vec<T> {
    (0..batch).map(|_| items[rng.next_below(items.len())].clone()).collect()
}

/// Pull a resumed checkpoint apart: moments feed the optimizer, the
/// snapshot drives model reconstruction.
fn resume_parts(
    path: &Path,
    kind: Kind,
    opt: &mut maskcodec_core::optim::AdamW,
) -> Result<(Config, maskcodec_core::nn::Params)> {
    let ck = load_checkpoint(path, kind)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, moments) = wiring::split_optimizer_state(ck.params);
    for (name, t) in &moments {
        opt.import_moment(name, t);
    }
    opt.set_step_count(ck.step);
    Ok((snap, params))
}

pub fn train_t2s(
    cfg: &Config,
    seed: u64,
    corpus: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let examples = read_t2s_corpus(corpus)?;
    ensure!(!examples.is_empty(), "t2s corpus is empty");
    let model_cfg = wiring::t2s_config(cfg)?;
    let max_text = examples.iter().flat_map(|e| &e.text).max().copied().unwrap_or(0);
    ensure!(
        (max_text as usize) < model_cfg.text_vocab,
        "corpus text id {max_text} outside corpus.text_vocab"
    );
    let max_sem = examples.iter().flat_map(|e| &e.semantic).max().copied().unwrap_or(0);
    ensure!(
        (max_sem as usize) < model_cfg.sem_vocab,
        "corpus semantic id {max_sem} outside semantic_codec.codebook_size"
    );
    let mut rng = RngState::new(seed);
    let mut opt = wiring::adamw(cfg)?;
    let mut model = match resume {
        None => T2sModel::new(model_cfg, &mut rng),
        Some(path) => {
            let (snap, params) = resume_parts(path, Kind::T2s, &mut opt)?;
            T2sModel::from_params(wiring::t2s_config(&snap)?, params)
        }
    };
    let batch = cfg.usize("t2s.batch")?.max(1);
    let steps = cfg.u64("t2s.train_steps")?;
    let ckpt = out_dir.join("t2s.ckpt");
    let start = opt.step_count();
    let snapshot = cfg.dump();
    let (steps_done, final_loss) = run_loop(
        cfg,
        steps,
        start,
        |tick| match tick {
            Tick::Step => {
                let b = sample_batch(&examples, batch, &mut rng);
                model.train_batch(&b, &mut opt, &mut rng).map_err(anyhow::Error::from)
            }
            Tick::Save => {
                save_checkpoint(
                    &ckpt,
                    Kind::T2s,
                    &snapshot,
                    opt.step_count(),
                    &model.params,
                    &opt.export_moments(&model.params),
                )?;
                Ok(0.0)
            }
        },
        &out_dir.join("t2s_loss.txt"),
    )?;
    Ok(TrainOutcome { steps: steps_done, final_loss, checkpoint: ckpt })
}

pub fn train_s2a(
    cfg: &Config,
    seed: u64,
    corpus: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let examples = read_s2a_corpus(corpus)?;
    ensure!(!examples.is_empty(), "s2a corpus is empty");
    let model_cfg = wiring::s2a_config(cfg)?;
    for ex in &examples {
        ex.grid.validate_range(model_cfg.acoustic_vocab);
        ensure!(
            ex.grid.layers() == model_cfg.n_layers,
            "corpus grid has {} layers, config expects {}",
            ex.grid.layers(),
            model_cfg.n_layers
        );
    }
    let mut rng = RngState::new(seed);
    let mut opt = wiring::adamw(cfg)?;
    let mut model = match resume {
        None => S2aModel::new(model_cfg, &mut rng),
        Some(path) => {
            let (snap, params) = resume_parts(path, Kind::S2a, &mut opt)?;
            S2aModel::from_params(wiring::s2a_config(&snap)?, params)
        }
    };
    let batch = cfg.usize("s2a.batch")?.max(1);
    let steps = cfg.u64("s2a.train_steps")?;
    let ckpt = out_dir.join("s2a.ckpt");
    let start = opt.step_count();
    let snapshot = cfg.dump();
    let (steps_done, final_loss) = run_loop(
        cfg,
        steps,
        start,
        |tick| match tick {
            Tick::Step => {
                let b = sample_batch(&examples, batch, &mut rng);
                model.train_batch(&b, &mut opt, &mut rng).map_err(anyhow::Error::from)
            }
            Tick::Save => {
                save_checkpoint(
                    &ckpt,
                    Kind::S2a,
                    &snapshot,
                    opt.step_count(),
                    &model.params,
                    &opt.export_moments(&model.params),
                )?;
                Ok(0.0)
            }
        },
        &out_dir.join("s2a_loss.txt"),
    )?;
    Ok(TrainOutcome { steps: steps_done, final_loss, checkpoint: ckpt })
}

pub fn train_duration(
    cfg: &Config,
    seed: u64,
    corpus: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    ckpt_name: &str,
) -> Result<TrainOutcome> {
    let examples = read_duration_corpus(corpus)?;
    ensure!(!examples.is_empty(), "duration corpus is empty");
    let mut rng = RngState::new(seed);
    let mut opt = wiring::adamw(cfg)?;
    let mut model = match resume {
        None => DurationModel::new(wiring::duration_config(cfg)?, &mut rng),
        Some(path) => {
            let (snap, params) = resume_parts(path, Kind::Duration, &mut opt)?;
            DurationModel::from_params(wiring::duration_config(&snap)?, params)
        }
    };
    let batch = cfg.usize("duration.batch")?.max(1);
    let steps = cfg.u64("duration.train_steps")?;
    let ckpt = out_dir.join(ckpt_name);
    let curve = out_dir.join(format!("{}_loss.txt", ckpt_name.trim_end_matches(".ckpt")));
    let start = opt.step_count();
    let snapshot = cfg.dump();
    let (steps_done, final_loss) = run_loop(
        cfg,
        steps,
        start,
        |tick| match tick {
            Tick::Step => {
                let b = sample_batch(&examples, batch, &mut rng);
                model.train_batch(&b, &mut opt, &mut rng).map_err(anyhow::Error::from)
            }
            Tick::Save => {
                save_checkpoint(
                    &ckpt,
                    Kind::Duration,
                    &snapshot,
                    opt.step_count(),
                    &model.params,
                    &opt.export_moments(&model.params),
                )?;
                Ok(0.0)
            }
        },
        &curve,
    )?;
    Ok(TrainOutcome { steps: steps_done, final_loss, checkpoint: ckpt })
}

/// Read every feature file in a directory, sorted by file name.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "bin").unwrap_or(false))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no .bin feature files in {}", dir.display());
    paths.iter().map(|p| load_features(p)).collect()
}

pub fn train_semantic_codec(
    cfg: &Config,
    seed: u64,
    features_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let raw = read_feature_dir(features_dir)?;
    let mut rng = RngState::new(seed);
    let mut opt = wiring::adamw(cfg)?;
    let mut codec = match resume {
        None => {
            let mut c = SemanticCodec::new(wiring::semantic_codec_config(cfg)?, &mut rng);
            let (mean, var) = feature_stats(&raw);
            c.set_norm_stats(mean, var);
            c
        }
        Some(path) => {
            let (snap, params) = resume_parts(path, Kind::SemanticCodec, &mut opt)?;
            SemanticCodec::from_params(wiring::semantic_codec_config(&snap)?, params)
        }
    };
    let normed: Vec<Tensor> = raw.iter().map(|t| codec.normalize(t)).collect();
    let batch = cfg.usize("semantic_codec.batch")?.max(1);
    let steps = cfg.u64("semantic_codec.train_steps")?;
    let ckpt = out_dir.join("semantic_codec.ckpt");
    let start = opt.step_count();
    let snapshot = cfg.dump();
    let (steps_done, final_loss) = run_loop(
        cfg,
        steps,
        start,
        |tick| match tick {
            Tick::Step => {
                let b = sample_batch(&normed, batch, &mut rng);
                codec.train_batch(&b, &mut opt, &mut rng).map_err(anyhow::Error::from)
            }
            Tick::Save => {
                save_checkpoint(
                    &ckpt,
                    Kind::SemanticCodec,
                    &snapshot,
                    opt.step_count(),
                    &codec.params,
                    &opt.export_moments(&codec.params),
                )?;
                Ok(0.0)
            }
        },
        &out_dir.join("semantic_codec_loss.txt"),
    )?;
    Ok(TrainOutcome { steps: steps_done, final_loss, checkpoint: ckpt })
}

pub fn train_acoustic_codec(
    cfg: &Config,
    seed: u64,
    features_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let frames = read_feature_dir(features_dir)?;
    let mut rng = RngState::new(seed);
    let mut opt = wiring::adamw(cfg)?;
    let mut stack = match resume {
        None => {
            let mut s = RvqStack::new(wiring::acoustic_codec_config(cfg)?, &mut rng);
            s.init_from_data(&frames, &mut rng);
            s
        }
        Some(path) => {
            let (snap, params) = resume_parts(path, Kind::AcousticCodec, &mut opt)?;
            RvqStack::from_params(wiring::acoustic_codec_config(&snap)?, params)
        }
    };
    let batch = cfg.usize("acoustic_codec.batch")?.max(1);
    let steps = cfg.u64("acoustic_codec.train_steps")?;
    let ckpt = out_dir.join("acoustic_codec.ckpt");
    let start = opt.step_count();
    let snapshot = cfg.dump();
    let (steps_done, final_loss) = run_loop(
        cfg,
        steps,
        start,
        |tick| match tick {
            Tick::Step => {
                let b = sample_batch(&frames, batch, &mut rng);
                stack.train_batch(&b, &mut opt, &mut rng).map_err(anyhow::Error::from)
            }
            Tick::Save => {
                save_checkpoint(
                    &ckpt,
                    Kind::AcousticCodec,
                    &snapshot,
                    opt.step_count(),
                    &stack.params,
                    &opt.export_moments(&stack.params),
                )?;
                Ok(0.0)
            }
        },
        &out_dir.join("acoustic_codec_loss.txt"),
    )?;
    Ok(TrainOutcome { steps: steps_done, final_loss, checkpoint: ckpt })
}

/// Load a model checkpoint for inference (optimizer state stripped).
pub fn load_t2s(path: &Path) -> Result<T2sModel> {
    let ck = load_checkpoint(path, Kind::T2s)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, _) = wiring::split_optimizer_state(ck.params);
    Ok(T2sModel::from_params(wiring::t2s_config(&snap)?, params))
}

pub fn load_s2a(path: &Path) -> Result<S2aModel> {
    let ck = load_checkpoint(path, Kind::S2a)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, _) = wiring::split_optimizer_state(ck.params);
    Ok(S2aModel::from_params(wiring::s2a_config(&snap)?, params))
}

pub fn load_duration(path: &Path) -> Result<DurationModel> {
    let ck = load_checkpoint(path, Kind::Duration)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, _) = wiring::split_optimizer_state(ck.params);
    Ok(DurationModel::from_params(wiring::duration_config(&snap)?, params))
}

pub fn load_semantic_codec(path: &Path) -> Result<SemanticCodec> {
    let ck = load_checkpoint(path, Kind::SemanticCodec)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, _) = wiring::split_optimizer_state(ck.params);
    Ok(SemanticCodec::from_params(wiring::semantic_codec_config(&snap)?, params))
}

pub fn load_acoustic_codec(path: &Path) -> Result<RvqStack> {
    let ck = load_checkpoint(path, Kind::AcousticCodec)?;
    let snap = Config::from_dump(&ck.config_text)?;
    let (params, _) = wiring::split_optimizer_state(ck.params);
    Ok(RvqStack::from_params(wiring::acoustic_codec_config(&snap)?, params))
}

//! Synthetic corpora with known ground truth. Everything is a pure
//! function of the seed: regenerating with the same spec yields byte
//! identical files.
//!
//! - text -> semantic: each text symbol expands to a fixed pair of
//!   semantic tokens (injective), optionally with a second pair used
//!   20% of the time to exercise sampling;
//! - semantic -> acoustic: each semantic token fixes every RVQ layer
//!   through per-layer random maps;
//! - durations: per-phone lognormal draws (integer frames), plus a
//!   pipeline variant whose durations equal the expansion counts so a
//!   predicted total length lines up with the semantic sequence;
//! - codec features: Gaussian cluster streams with sticky cluster
//!   switching and AR(1) within-run noise.

use anyhow::{ensure, Result};
use maskcodec_core::acoustic_codec::AcousticTokenGrid;
use maskcodec_core::duration::DurationExample;
use maskcodec_core::rng::RngState;
use maskcodec_core::s2a::S2aExample;
use maskcodec_core::t2s::T2sExample;
use maskcodec_core::Tensor;

use crate::config::Config;

pub const TOKENS_PER_SYMBOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingKind {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub text_vocab: usize,
    pub sem_vocab: usize,
    pub acoustic_vocab: usize,
    pub acoustic_layers: usize,
    pub mapping: MappingKind,
    pub noise_p: f32,
    pub utt_min: usize,
    pub utt_max: usize,
    pub count: usize,
    pub dur_log_mean_min: f32,
    pub dur_log_mean_max: f32,
    pub dur_log_std: f32,
    pub clusters: usize,
    pub cluster_spread: f32,
    pub cluster_noise: f32,
    pub switch_p: f32,
    pub feature_seqs: usize,
    pub feature_frames: usize,
    pub feat_dim: usize,
}

impl SyntheticTaskSpec {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let spec = SyntheticTaskSpec {
            seed,
            text_vocab: cfg.usize("corpus.text_vocab")?,
            sem_vocab: cfg.usize("semantic_codec.codebook_size")?,
            acoustic_vocab: cfg.usize("acoustic_codec.codebook_size")?,
            acoustic_layers: cfg.usize("acoustic_codec.layers")?,
            mapping: match cfg.get("corpus.mapping") {
                "deterministic" => MappingKind::Deterministic,
                "stochastic" => MappingKind::Stochastic,
                other => anyhow::bail!("corpus.mapping must be deterministic|stochastic, got `{other}`"),
            },
            noise_p: cfg.f32("corpus.noise_p")?,
            utt_min: cfg.usize("corpus.utt_min")?,
            utt_max: cfg.usize("corpus.utt_max")?,
            count: cfg.usize("corpus.count")?,
            dur_log_mean_min: cfg.f32("corpus.dur_log_mean_min")?,
            dur_log_mean_max: cfg.f32("corpus.dur_log_mean_max")?,
            dur_log_std: cfg.f32("corpus.dur_log_std")?,
            clusters: cfg.usize("corpus.clusters")?,
            cluster_spread: cfg.f32("corpus.cluster_spread")?,
            cluster_noise: cfg.f32("corpus.cluster_noise")?,
            switch_p: cfg.f32("corpus.switch_p")?,
            feature_seqs: cfg.usize("corpus.feature_seqs")?,
            feature_frames: cfg.usize("corpus.feature_frames")?,
            feat_dim: cfg.usize("semantic_codec.feat_dim")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.utt_min >= 1 && self.utt_min <= self.utt_max, "bad utterance length range");
        ensure!(
            self.text_vocab * TOKENS_PER_SYMBOL <= self.sem_vocab * self.sem_vocab,
            "semantic vocabulary too small for an injective expansion map"
        );
        ensure!(self.count >= 10, "corpus.count too small to split");
        Ok(())
    }
}

/// The ground-truth maps every corpus is built from.
pub struct TaskMaps {
    /// Primary expansion pair per text symbol.
    pub pairs: Vec<[u32; 2]>,
    /// Alternative pair (stochastic mapping only).
    pub alt_pairs: Vec<[u32; 2]>,
    /// Per-layer semantic -> acoustic token maps.
    pub acoustic_maps: Vec<Vec<u32>>,
    /// Per-phone lognormal location parameter.
    pub dur_log_mean: Vec<f32>,
    /// Cluster centers for the feature stream.
    pub centers: Vec<Vec<f32>>,
}

impl TaskMaps {
    /// Derive all maps from the seed. Pair assignments are sampled
    /// without replacement so the expansion is injective.
    pub fn build(spec: &SyntheticTaskSpec) -> TaskMaps {
        let mut rng = RngState::new(spec.seed ^ 0x6d61_7073); // independent of corpus draws
        let v = spec.sem_vocab as u64;
        let mut taken: std::collections::BTreeSet<u64> = std::collections::BTreeSet::new();
        let mut draw_pair = |rng: &mut RngState| -> [u32; 2] {
            loop {
                let code = rng.next_u64() % (v * v);
                if taken.insert(code) {
                    return [(code / v) as u32, (code % v) as u32];
                }
            }
        };
        let pairs: Vec<[u32; 2]> = (0..spec.text_vocab).map(|_| draw_pair(&mut rng)).collect();
        let alt_pairs: Vec<[u32; 2]> = (0..spec.text_vocab).map(|_| draw_pair(&mut rng)).collect();
        let acoustic_maps: Vec<Vec<u32>> = (0..spec.acoustic_layers)
            .map(|_| {
                (0..spec.sem_vocab)
                    .map(|_| rng.next_below(spec.acoustic_vocab) as u32)
                    .collect()
            })
            .collect();
        let dur_log_mean: Vec<f32> = (0..spec.text_vocab)
            .map(|_| {
                spec.dur_log_mean_min
                    + rng.next_f32() * (spec.dur_log_mean_max - spec.dur_log_mean_min)
            })
            .collect();
        let centers: Vec<Vec<f32>> = (0..spec.clusters)
            .map(|_| (0..spec.feat_dim).map(|_| rng.next_gaussian() * spec.cluster_spread).collect())
            .collect();
        TaskMaps { pairs, alt_pairs, acoustic_maps, dur_log_mean, centers }
    }

    /// Expand a text sequence to its semantic tokens (ground truth).
    pub fn expand_text(&self, text: &[u32], spec: &SyntheticTaskSpec, rng: &mut RngState) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() * TOKENS_PER_SYMBOL);
        for &s in text {
            let pair = match spec.mapping {
                MappingKind::Deterministic => &self.pairs[s as usize],
                MappingKind::Stochastic => {
                    if rng.next_f32() < spec.noise_p {
                        &self.alt_pairs[s as usize]
                    } else {
                        &self.pairs[s as usize]
                    }
                }
            };
            out.extend_from_slice(pair);
        }
        out
    }

    /// Acoustic grid fixed by the semantic sequence.
    pub fn grid_for(&self, semantic: &[u32]) -> AcousticTokenGrid {
        let layers = self.acoustic_maps.len();
        let mut grid = AcousticTokenGrid::zeros(layers, semantic.len());
        for (l, map) in self.acoustic_maps.iter().enumerate() {
            for (f, &s) in semantic.iter().enumerate() {
                grid.set(l, f, map[s as usize]);
            }
        }
        grid
    }
}

/// Full corpus bundle, already split 90/10.
pub struct CorpusBundle {
    pub t2s_train: Vec<T2sExample>,
    pub t2s_heldout: Vec<T2sExample>,
    pub s2a_train: Vec<S2aExample>,
    pub s2a_heldout: Vec<S2aExample>,
    pub duration_train: Vec<DurationExample>,
    pub duration_heldout: Vec<DurationExample>,
    pub pipeline_duration_train: Vec<DurationExample>,
    pub pipeline_duration_heldout: Vec<DurationExample>,
    pub features_train: Vec<Tensor>,
    pub features_heldout: Vec<Tensor>,
    pub acoustic_features_train: Vec<Tensor>,
    pub acoustic_features_heldout: Vec<Tensor>,
}

pub fn generate(spec: &SyntheticTaskSpec) -> Result<CorpusBundle> {
    spec.validate()?;
    let maps = TaskMaps::build(spec);
    let mut rng = RngState::new(spec.seed);

    // Joint utterances: text, semantic expansion, acoustic grid, and the
    // matching pipeline durations (= expansion counts).
    let mut t2s = Vec::with_capacity(spec.count);
    let mut s2a = Vec::with_capacity(spec.count);
    let mut pipe_dur = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let len = spec.utt_min + rng.next_below(spec.utt_max - spec.utt_min + 1);
        let text: Vec<u32> = (0..len).map(|_| rng.next_below(spec.text_vocab) as u32).collect();
        let semantic = maps.expand_text(&text, spec, &mut rng);
        let grid = maps.grid_for(&semantic);
        pipe_dur.push(DurationExample {
            phones: text.clone(),
            durations: vec![TOKENS_PER_SYMBOL as f32; text.len()],
        });
        s2a.push(S2aExample { semantic: semantic.clone(), grid });
        t2s.push(T2sExample { text, semantic });
    }

    // Lognormal duration corpus over the same phone inventory.
    let mut durations = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let len = spec.utt_min + rng.next_below(spec.utt_max - spec.utt_min + 1);
        let phones: Vec<u32> = (0..len).map(|_| rng.next_below(spec.text_vocab) as u32).collect();
        let durs: Vec<f32> = phones
            .iter()
            .map(|&p| {
                let log_d = maps.dur_log_mean[p as usize] + spec.dur_log_std * rng.next_gaussian();
                log_d.exp().round().max(1.0)
            })
            .collect();
        durations.push(DurationExample { phones, durations: durs });
    }

    // Cluster feature streams (semantic codec) and an independent set
    // for the acoustic codec.
    let mut features = Vec::with_capacity(spec.feature_seqs);
    let mut acoustic_features = Vec::with_capacity(spec.feature_seqs);
    for _ in 0..spec.feature_seqs {
        features.push(cluster_stream(spec, &maps, &mut rng));
    }
    for _ in 0..spec.feature_seqs {
        acoustic_features.push(cluster_stream(spec, &maps, &mut rng));
    }

    let cut = |n: usize| n - n / 10;
    let (t2s_train, t2s_heldout) = split(t2s, cut(spec.count));
    let (s2a_train, s2a_heldout) = split(s2a, cut(spec.count));
    let (pd_train, pd_heldout) = split(pipe_dur, cut(spec.count));
    let (duration_train, duration_heldout) = split(durations, cut(spec.count));
    let fcut = cut(spec.feature_seqs);
    let (features_train, features_heldout) = split(features, fcut);
    let (af_train, af_heldout) = split(acoustic_features, fcut);

    Ok(CorpusBundle {
        t2s_train,
        t2s_heldout,
        s2a_train,
        s2a_heldout,
        duration_train,
        duration_heldout,
        pipeline_duration_train: pd_train,
        pipeline_duration_heldout: pd_heldout,
        features_train,
        features_heldout,
        acoustic_features_train: af_train,
        acoustic_features_heldout: af_heldout,
    })
}

fn split<T>(mut items: Vec<T>, cut: usize) -> (Vec<T>, Vec<T>) {
    let tail = items.split_off(cut.min(items.len()));
    (items, tail)
}

/// One feature sequence: a sticky random walk over cluster centers with
/// AR(1) noise inside each run, so frames vary smoothly in time.
fn cluster_stream(spec: &SyntheticTaskSpec, maps: &TaskMaps, rng: &mut RngState) -> Tensor {
    let d = spec.feat_dim;
    let mut cluster = rng.next_below(spec.clusters);
    let mut noise: Vec<f32> = (0..d).map(|_| rng.next_gaussian() * spec.cluster_noise).collect();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(spec.feature_frames);
    for _ in 0..spec.feature_frames {
        if rng.next_f32() < spec.switch_p {
            cluster = rng.next_below(spec.clusters);
        }
        for n in noise.iter_mut() {
            *n = 0.6 * *n + 0.8 * spec.cluster_noise * rng.next_gaussian();
        }
        let row: Vec<f32> =
            maps.centers[cluster].iter().zip(&noise).map(|(c, n)| c + n).collect();
        rows.push(row);
    }
    Tensor::from_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec::from_config(&Config::desk(), 7).unwrap()
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.t2s_train, b.t2s_train);
        assert_eq!(a.s2a_heldout, b.s2a_heldout);
        assert_eq!(a.duration_train, b.duration_train);
        assert_eq!(a.features_train, b.features_train);
        let mut other = spec();
        other.seed = 8;
        let c = generate(&other).unwrap();
        assert_ne!(a.t2s_train, c.t2s_train);
    }

    #[test]
    fn deterministic_mapping_has_unique_expansions() {
        let s = spec();
        let maps = TaskMaps::build(&s);
        let mut seen = std::collections::BTreeSet::new();
        for p in &maps.pairs {
            assert!(seen.insert(*p), "duplicate pair {p:?}");
        }
        // Every text sequence expands to exactly one semantic sequence.
        let mut rng = RngState::new(1);
        let text = vec![0u32, 5, 3];
        let a = maps.expand_text(&text, &s, &mut rng);
        let b = maps.expand_text(&text, &s, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.len(), text.len() * TOKENS_PER_SYMBOL);
    }

    #[test]
    fn alignment_invariant_holds_in_every_record() {
        let bundle = generate(&spec()).unwrap();
        for ex in bundle.s2a_train.iter().chain(&bundle.s2a_heldout) {
            assert_eq!(ex.semantic.len(), ex.grid.frames());
        }
    }

    #[test]
    fn pipeline_durations_match_expansion_counts() {
        let bundle = generate(&spec()).unwrap();
        for (t2s, dur) in bundle.t2s_train.iter().zip(&bundle.pipeline_duration_train) {
            assert_eq!(t2s.text, dur.phones);
            let total: f32 = dur.durations.iter().sum();
            assert_eq!(total as usize, t2s.semantic.len());
        }
    }

    #[test]
    fn split_is_ninety_ten() {
        let bundle = generate(&spec()).unwrap();
        let total = bundle.t2s_train.len() + bundle.t2s_heldout.len();
        assert_eq!(total, spec().count);
        assert_eq!(bundle.t2s_heldout.len(), spec().count / 10);
    }

    #[test]
    fn feature_streams_have_requested_shape() {
        let s = spec();
        let bundle = generate(&s).unwrap();
        for f in &bundle.features_train {
            assert_eq!(f.shape(), (s.feature_frames, s.feat_dim));
            assert!(f.all_finite());
        }
    }
}

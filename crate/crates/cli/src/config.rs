//! Flat namespaced configuration: every tunable in the pipeline is a
//! `module.param` key with a desk-scale default, optionally overridden
//! by the `paper` preset, a config file, and repeatable `--set` flags.
//! Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

/// `(key, desk default)` for every known key.
const REGISTRY: &[(&str, &str)] = &[
    // optimizer
    ("optim.lr", "3e-3"),
    ("optim.warmup", "500"),
    ("optim.beta1", "0.9"),
    ("optim.beta2", "0.999"),
    ("optim.eps", "1e-8"),
    ("optim.weight_decay", "0.01"),
    // semantic codec
    ("semantic_codec.feat_dim", "8"),
    ("semantic_codec.hidden", "32"),
    ("semantic_codec.blocks", "2"),
    ("semantic_codec.kernel", "7"),
    ("semantic_codec.codebook_size", "64"),
    ("semantic_codec.code_dim", "4"),
    ("semantic_codec.lambda_rec", "1.0"),
    ("semantic_codec.lambda_codebook", "1.0"),
    ("semantic_codec.lambda_commit", "0.25"),
    ("semantic_codec.revive_age", "200"),
    ("semantic_codec.train_steps", "2000"),
    ("semantic_codec.batch", "8"),
    // acoustic codec
    ("acoustic_codec.feat_dim", "8"),
    ("acoustic_codec.layers", "4"),
    ("acoustic_codec.codebook_size", "32"),
    ("acoustic_codec.lambda_rec", "10.0"),
    ("acoustic_codec.lambda_codebook", "1.0"),
    ("acoustic_codec.lambda_commit", "0.25"),
    ("acoustic_codec.windows", "1,4,16"),
    ("acoustic_codec.sample_rate", "24000"),
    ("acoustic_codec.hop", "480"),
    ("acoustic_codec.train_steps", "600"),
    ("acoustic_codec.batch", "8"),
    // text-to-semantic
    ("t2s.layers", "4"),
    ("t2s.model_dim", "64"),
    ("t2s.ffn_dim", "256"),
    ("t2s.heads", "4"),
    ("t2s.rope_theta", "10000"),
    ("t2s.steps", "25"),
    ("t2s.top_k", "20"),
    ("t2s.temp_start", "1.5"),
    ("t2s.temp_end", "0.0"),
    ("t2s.gumbel", "true"),
    ("t2s.prompt_drop", "0.15"),
    ("t2s.max_prompt_frac", "0.5"),
    ("t2s.train_steps", "2000"),
    ("t2s.batch", "24"),
    // semantic-to-acoustic
    ("s2a.layers", "2"),
    ("s2a.model_dim", "64"),
    ("s2a.ffn_dim", "256"),
    ("s2a.heads", "4"),
    ("s2a.rope_theta", "10000"),
    ("s2a.steps_schedule", "8,4,1,1"),
    ("s2a.steps_fast", "10,1,1,1"),
    ("s2a.prompt_drop", "0.15"),
    ("s2a.max_prompt_frac", "0.5"),
    ("s2a.train_steps", "2000"),
    ("s2a.batch", "8"),
    // classifier-free guidance
    ("cfg.w", "0.0"),
    ("cfg.rescale", "0.75"),
    // duration predictor
    ("duration.layers", "2"),
    ("duration.model_dim", "64"),
    ("duration.ffn_dim", "256"),
    ("duration.heads", "4"),
    ("duration.rope_theta", "10000"),
    ("duration.solver_steps", "4"),
    ("duration.cfg_w", "1.0"),
    ("duration.prompt_drop", "0.15"),
    ("duration.max_prompt_frac", "0.5"),
    ("duration.train_steps", "1500"),
    ("duration.batch", "8"),
    // synthetic corpus
    ("corpus.text_vocab", "8"),
    ("corpus.mapping", "deterministic"),
    ("corpus.noise_p", "0.2"),
    ("corpus.utt_min", "3"),
    ("corpus.utt_max", "5"),
    ("corpus.count", "512"),
    ("corpus.dur_log_mean_min", "1.2"),
    ("corpus.dur_log_mean_max", "2.4"),
    ("corpus.dur_log_std", "0.1"),
    ("corpus.clusters", "8"),
    ("corpus.cluster_spread", "3.0"),
    ("corpus.cluster_noise", "0.05"),
    ("corpus.switch_p", "0.3"),
    ("corpus.feature_seqs", "64"),
    ("corpus.feature_frames", "24"),
    // training loop
    ("train.ckpt_every", "500"),
    ("train.log_every", "100"),
    // evaluation
    ("eval.prompt_frac", "0.25"),
    ("eval.sweep", "5,10,25,50"),
    ("eval.max_utts", "0"),
];

/// Paper-scale overrides (untested presets; they exist so the paper
/// hyperparameters are written down as config, not prose).
const PAPER_OVERRIDES: &[(&str, &str)] = &[
    ("optim.lr", "1e-4"),
    ("cfg.w", "2.5"),
    ("corpus.text_vocab", "16"),
    ("corpus.utt_min", "4"),
    ("corpus.utt_max", "8"),
    ("optim.warmup", "32000"),
    ("semantic_codec.feat_dim", "1024"),
    ("semantic_codec.hidden", "384"),
    ("semantic_codec.blocks", "12"),
    ("semantic_codec.codebook_size", "8192"),
    ("semantic_codec.code_dim", "8"),
    ("acoustic_codec.layers", "12"),
    ("acoustic_codec.codebook_size", "1024"),
    ("t2s.layers", "16"),
    ("t2s.model_dim", "1024"),
    ("t2s.ffn_dim", "4096"),
    ("t2s.heads", "16"),
    ("t2s.steps", "50"),
    ("s2a.layers", "16"),
    ("s2a.model_dim", "1024"),
    ("s2a.ffn_dim", "4096"),
    ("s2a.heads", "16"),
    ("s2a.steps_schedule", "40,16,1,1,1,1,1,1,1,1,1,1"),
    ("s2a.steps_fast", "10,1,1,1,1,1,1,1,1,1,1,1"),
    ("duration.layers", "12"),
    ("duration.model_dim", "768"),
    ("duration.ffn_dim", "3072"),
    ("duration.heads", "12"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => bail!("unknown preset `{other}` (expected desk or paper)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let mut map: BTreeMap<String, String> =
            REGISTRY.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect();
        if preset == Preset::Paper {
            for &(k, v) in PAPER_OVERRIDES {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Config { map }
    }

    pub fn desk() -> Self {
        Config::preset(Preset::Desk)
    }

    /// Set one key, rejecting anything not in the registry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(anyhow!("unknown config key `{key}`"));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` pair as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{pair}`"))?;
        self.set(k.trim(), v.trim())
    }

    /// Load overrides from a config file of `key=value` lines
    /// (`#` comments and blank lines allowed).
    pub fn load_overrides(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` missing from registry"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key).parse().with_context(|| format!("key `{key}` must be an integer"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key).parse().with_context(|| format!("key `{key}` must be an integer"))
    }

    pub fn f32(&self, key: &str) -> Result<f32> {
        self.get(key).parse().with_context(|| format!("key `{key}` must be a number"))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.get(key).parse().with_context(|| format!("key `{key}` must be true/false"))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("key `{key}` must be a comma-separated integer list"))
    }

    /// Canonical `key=value` dump, one line per key, sorted.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Rebuild from a dump embedded in a checkpoint. Unknown keys fail
    /// loudly: a newer-format snapshot should not load silently.
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical dump, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.dump().as_bytes() {
            h ^= *byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

//! Command-line interface for the two-stage masked-codec pipeline.
//!
//! Errors print as one machine-parseable line, `error code=E_XXX ...`,
//! and exit nonzero; contract violations (panics from validated
//! preconditions) map to `E_CONTRACT`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use maskcodec::checkpoint::{load_checkpoint, peek_kind, Kind};
use maskcodec::config::{Config, Preset};
use maskcodec::corpus::generate_and_write;
use maskcodec::eval::{
    eval_compose, eval_duration, eval_s2a, eval_semantic_codec, eval_t2s,
};
use maskcodec::formats::{
    read_duration_corpus, read_prompt, read_s2a_corpus, read_t2s_corpus, EvalReport, SweepRow,
};
use maskcodec::synth::{synthesize, write_outputs, LengthSpec};
use maskcodec::train;
use maskcodec::wiring;
use maskcodec_core::rng::RngState;

#[derive(Parser)]
#[command(name = "maskcodec", about = "Masked generative codec-token pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration preset.
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Config file of key=value lines, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed for everything downstream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::preset(self.preset);
        if let Some(path) = &self.config {
            cfg.load_overrides(path).map_err(|e| coded("E_CONFIG", e))?;
        }
        for pair in &self.set {
            cfg.set_pair(pair).map_err(|e| coded("E_CONFIG", e))?;
        }
        println!("# resolved config (hash {})", cfg.hash());
        print!("{}", cfg.dump());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora for every trainable module.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train the semantic VQ-VAE on feature files.
    TrainSemanticCodec {
        #[command(flatten)]
        common: Common,
        /// Directory of .bin feature files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the acoustic RVQ stack on feature files.
    TrainAcousticCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the text-to-semantic model.
    TrainT2s {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the semantic-to-acoustic model.
    TrainS2a {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the flow-matching duration predictor.
    TrainDuration {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint file name inside the output directory.
        #[arg(long, default_value = "duration.ckpt")]
        name: String,
    },
    /// Run the two-stage synthesis chain for one utterance.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t2s: PathBuf,
        #[arg(long)]
        s2a: PathBuf,
        #[arg(long)]
        duration: Option<PathBuf>,
        /// Text token ids, space separated.
        #[arg(long)]
        text: String,
        /// Prompt record file.
        #[arg(long)]
        prompt: PathBuf,
        /// Target semantic length; omit to predict it.
        #[arg(long)]
        length: Option<usize>,
        /// Use the fast per-layer step schedule.
        #[arg(long, default_value_t = false)]
        fast: bool,
    },
    /// Evaluate checkpoints on held-out corpora.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t2s: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run the accuracy-vs-steps sweep from eval.sweep.
        #[arg(long, default_value_t = false)]
        sweep: bool,
        #[arg(long)]
        s2a: Option<PathBuf>,
        #[arg(long)]
        s2a_corpus: Option<PathBuf>,
        #[arg(long)]
        duration: Option<PathBuf>,
        #[arg(long)]
        duration_corpus: Option<PathBuf>,
        #[arg(long)]
        semantic_codec: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Score the end-to-end composition (needs --t2s, --s2a, paired
        /// corpora; --duration adds predicted-length scoring).
        #[arg(long, default_value_t = false)]
        compose: bool,
        #[arg(long, default_value_t = false)]
        fast: bool,
    },
    /// Print a checkpoint's header and tensor index.
    InspectCheckpoint {
        /// Checkpoint or feature file.
        path: PathBuf,
    },
}

fn main() {
    let exit = match std::panic::catch_unwind(run) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            let code = e
                .downcast_ref::<Coded>()
                .map(|c| c.code)
                .unwrap_or("E_RUNTIME");
            eprintln!("error code={code} msg={:?}", format!("{e:#}"));
            1
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "contract violation".to_string());
            eprintln!("error code=E_CONTRACT msg={msg:?}");
            2
        }
    };
    std::process::exit(exit);
}

#[derive(Debug)]
struct Coded {
    code: &'static str,
    inner: anyhow::Error,
}

impl std::fmt::Display for Coded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Coded {}

fn coded(code: &'static str, inner: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Coded { code, inner })
}

fn parse_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| t.parse::<u32>().context("text ids must be nonnegative integers"))
        .collect::<Result<Vec<u32>>>()
        .map_err(|e| coded("E_FORMAT", e))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus { common } => {
            let cfg = common.resolve()?;
            let bundle = generate_and_write(&cfg, common.seed, &common.out)
                .map_err(|e| coded("E_FORMAT", e))?;
            println!(
                "corpus written to {} ({} train / {} held-out utterances)",
                common.out.display(),
                bundle.t2s_train.len(),
                bundle.t2s_heldout.len()
            );
            Ok(())
        }
        Command::TrainSemanticCodec { common, features, resume } => {
            let cfg = common.resolve()?;
            let out = train::train_semantic_codec(
                &cfg,
                common.seed,
                &features,
                &common.out,
                resume.as_deref(),
            )
            .map_err(tag_train_error)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainAcousticCodec { common, features, resume } => {
            let cfg = common.resolve()?;
            let out = train::train_acoustic_codec(
                &cfg,
                common.seed,
                &features,
                &common.out,
                resume.as_deref(),
            )
            .map_err(tag_train_error)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainT2s { common, corpus, resume } => {
            let cfg = common.resolve()?;
            let out = train::train_t2s(&cfg, common.seed, &corpus, &common.out, resume.as_deref())
                .map_err(tag_train_error)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainS2a { common, corpus, resume } => {
            let cfg = common.resolve()?;
            let out = train::train_s2a(&cfg, common.seed, &corpus, &common.out, resume.as_deref())
                .map_err(tag_train_error)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::TrainDuration { common, corpus, resume, name } => {
            let cfg = common.resolve()?;
            let out = train::train_duration(
                &cfg,
                common.seed,
                &corpus,
                &common.out,
                resume.as_deref(),
                &name,
            )
            .map_err(tag_train_error)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::Synthesize { common, t2s, s2a, duration, text, prompt, length, fast } => {
            let cfg = common.resolve()?;
            let started = Instant::now();
            let text = parse_ids(&text)?;
            let prompt = read_prompt(&prompt).map_err(|e| coded("E_FORMAT", e))?;
            let t2s_model = train::load_t2s(&t2s).map_err(|e| coded("E_FORMAT", e))?;
            let s2a_model = train::load_s2a(&s2a).map_err(|e| coded("E_FORMAT", e))?;
            let dur_model = match &duration {
                Some(p) => Some(train::load_duration(p).map_err(|e| coded("E_FORMAT", e))?),
                None => None,
            };
            let spec = match length {
                Some(n) => LengthSpec::Given(n),
                None => LengthSpec::Predict,
            };
            let t2s_dcfg = wiring::t2s_decode_config(&cfg)?;
            let s2a_dcfg = wiring::s2a_decode_config(&cfg)?;
            let schedule = wiring::s2a_schedule(&cfg, fast)?;
            let mut rng = RngState::new(common.seed);
            let out = synthesize(
                &t2s_model,
                &s2a_model,
                dur_model.as_ref(),
                &text,
                &prompt,
                spec,
                &t2s_dcfg,
                &s2a_dcfg,
                &schedule,
                &mut rng,
            )
            .map_err(tag_train_error)?;
            write_outputs(
                &common.out,
                &out,
                &cfg.hash(),
                common.seed,
                started.elapsed().as_secs_f64(),
            )?;
            println!(
                "synthesized {} semantic tokens and a {}x{} grid into {}",
                out.semantic.len(),
                out.grid.layers(),
                out.grid.frames(),
                common.out.display()
            );
            Ok(())
        }
        Command::Eval {
            common,
            t2s,
            corpus,
            sweep,
            s2a,
            s2a_corpus,
            duration,
            duration_corpus,
            semantic_codec,
            features,
            compose,
            fast,
        } => {
            let cfg = common.resolve()?;
            let started = Instant::now();
            let mut report = EvalReport {
                config_hash: cfg.hash(),
                seed: common.seed,
                ..EvalReport::default()
            };
            let prompt_frac = cfg.f32("eval.prompt_frac")?;
            let max_utts = cfg.usize("eval.max_utts")?;
            let mut did_anything = false;

            let t2s_model = match &t2s {
                Some(p) => Some(train::load_t2s(p).map_err(|e| coded("E_FORMAT", e))?),
                None => None,
            };
            let s2a_model = match &s2a {
                Some(p) => Some(train::load_s2a(p).map_err(|e| coded("E_FORMAT", e))?),
                None => None,
            };
            let dur_model = match &duration {
                Some(p) => Some(train::load_duration(p).map_err(|e| coded("E_FORMAT", e))?),
                None => None,
            };

            if let (Some(model), Some(corpus)) = (&t2s_model, &corpus) {
                let examples = read_t2s_corpus(corpus).map_err(|e| coded("E_FORMAT", e))?;
                let dcfg = wiring::t2s_decode_config(&cfg)?;
                let r = eval_t2s(model, &examples, &dcfg, prompt_frac, common.seed, max_utts)
                    .map_err(tag_train_error)?;
                report.token_accuracy = Some(r.token_accuracy);
                report.exact_match = Some(r.exact_match);
                if sweep {
                    for steps in cfg.usize_list("eval.sweep")? {
                        let mut d = dcfg.clone();
                        d.steps = steps;
                        let r =
                            eval_t2s(model, &examples, &d, prompt_frac, common.seed, max_utts)
                                .map_err(tag_train_error)?;
                        report.sweep.push(SweepRow {
                            steps,
                            token_accuracy: r.token_accuracy,
                            exact_match: r.exact_match,
                        });
                    }
                }
                did_anything = true;
            }

            if let (Some(model), Some(corpus)) = (&s2a_model, &s2a_corpus) {
                let examples = read_s2a_corpus(corpus).map_err(|e| coded("E_FORMAT", e))?;
                let dcfg = wiring::s2a_decode_config(&cfg)?;
                let schedule = wiring::s2a_schedule(&cfg, fast)?;
                let r = eval_s2a(
                    model,
                    &examples,
                    &schedule,
                    &dcfg,
                    prompt_frac,
                    common.seed,
                    max_utts,
                )
                .map_err(tag_train_error)?;
                report.per_layer_accuracy = Some(r.per_layer_accuracy);
                report.grid_exact_match = Some(r.grid_exact_match);
                did_anything = true;
            }

            if let (Some(model), Some(corpus)) = (&dur_model, &duration_corpus) {
                let examples =
                    read_duration_corpus(corpus).map_err(|e| coded("E_FORMAT", e))?;
                let r = eval_duration(model, &examples, prompt_frac, common.seed, max_utts)
                    .map_err(tag_train_error)?;
                report.duration_mean_rel_err = Some(r.mean_rel_err);
                report.duration_within_10pct = Some(r.within_10pct);
                did_anything = true;
            }

            if let (Some(path), Some(dir)) = (&semantic_codec, &features) {
                let codec = train::load_semantic_codec(path).map_err(|e| coded("E_FORMAT", e))?;
                let heldout = train::read_feature_dir(dir).map_err(|e| coded("E_FORMAT", e))?;
                let r = eval_semantic_codec(&codec, &heldout).map_err(tag_train_error)?;
                report.codebook_utilization = Some(r.utilization);
                report.recon_l1_per_dim = Some(r.recon_l1_per_dim);
                did_anything = true;
            }

            if compose {
                let t2s_model = t2s_model
                    .as_ref()
                    .context("--compose requires --t2s")
                    .map_err(|e| coded("E_CONFIG", e))?;
                let s2a_model = s2a_model
                    .as_ref()
                    .context("--compose requires --s2a")
                    .map_err(|e| coded("E_CONFIG", e))?;
                let t2s_corpus = corpus
                    .as_ref()
                    .context("--compose requires --corpus")
                    .map_err(|e| coded("E_CONFIG", e))?;
                let s2a_corpus = s2a_corpus
                    .as_ref()
                    .context("--compose requires --s2a-corpus")
                    .map_err(|e| coded("E_CONFIG", e))?;
                let te = read_t2s_corpus(t2s_corpus).map_err(|e| coded("E_FORMAT", e))?;
                let se = read_s2a_corpus(s2a_corpus).map_err(|e| coded("E_FORMAT", e))?;
                let r = eval_compose(
                    t2s_model,
                    s2a_model,
                    dur_model.as_ref(),
                    &te,
                    &se,
                    &wiring::t2s_decode_config(&cfg)?,
                    &wiring::s2a_decode_config(&cfg)?,
                    &wiring::s2a_schedule(&cfg, fast)?,
                    prompt_frac,
                    common.seed,
                    max_utts,
                )
                .map_err(tag_train_error)?;
                report.end_to_end_exact_match = Some(r.end_to_end_exact_match);
                report.predicted_length_within_10pct = r.predicted_length_within_10pct;
                did_anything = true;
            }

            if !did_anything {
                return Err(coded(
                    "E_CONFIG",
                    anyhow::anyhow!("eval needs at least one checkpoint/corpus pair"),
                ));
            }
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            let text = report.to_text();
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("eval_report.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::InspectCheckpoint { path } => {
            let kind = peek_kind(&path).map_err(|e| coded("E_FORMAT", e))?;
            if kind == Kind::Features {
                let frames =
                    maskcodec::checkpoint::load_features(&path).map_err(|e| coded("E_FORMAT", e))?;
                println!("kind=features rows={} cols={}", frames.rows(), frames.cols());
                return Ok(());
            }
            let ck = load_checkpoint(&path, kind).map_err(|e| coded("E_FORMAT", e))?;
            println!("kind={} step={}", ck.kind.name(), ck.step);
            let cfg = Config::from_dump(&ck.config_text).map_err(|e| coded("E_FORMAT", e))?;
            println!("config_hash={}", cfg.hash());
            let mut total = 0usize;
            for (name, t) in ck.params.iter() {
                println!("tensor {name} [{} x {}]", t.rows(), t.cols());
                total += t.len();
            }
            println!("total_values={total}");
            Ok(())
        }
    }
}

/// Training and inference errors: non-finite numerics get their own
/// code, everything else stays a runtime error.
fn tag_train_error(e: anyhow::Error) -> anyhow::Error {
    let is_numeric = e
        .chain()
        .any(|c| c.downcast_ref::<maskcodec_core::CoreError>().is_some())
        || format!("{e:#}").contains("non-finite");
    if is_numeric {
        coded("E_NUMERIC", e)
    } else {
        coded("E_RUNTIME", e)
    }
}

fn _assert_path_use(_: &Path) {}

//! `emovec`: build, apply and evaluate emotion vectors.
//!
//! Exit codes: 0 on success, 1 on invalid input (bad flags, configs or file
//! contents), 2 when a file cannot be read or written.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emovec_core::arith::{apply_vector, extract_vector, parameter_stats};
use emovec_core::embed::{EmbedderModel, SpeakerTable};
use emovec_core::eval::{intensity_ordering_eval, secs_eval, test_sentences, IntensityEstimator};
use emovec_core::model::{ModelConfig, Weights};
use emovec_core::param_store::{self, ParameterSet};
use emovec_core::pipeline::Pipeline;
use emovec_core::synth::Frame;
use emovec_core::{Case, Corpus, Emotion, Error, ExperimentConfig, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "emovec", version, about = "Emotion vectors: extract, apply and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    DatasetGen(ConfigArgs),
    /// Train the speaker encoder and write per-speaker conditioning vectors.
    TrainEmbedder(ConfigArgs),
    /// Pretrain the neutral model (multi-speaker, or one speaker with --speaker).
    Pretrain {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Fine-tune the pretrained model on one emotion.
    Finetune {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        emotion: Emotion,
        /// Fine-tune on this speaker only, starting from its single-speaker pretrain.
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Subtract a pretrained checkpoint from a fine-tuned one.
    ExtractVector {
        #[arg(long)]
        emo: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Add a scaled emotion vector to a checkpoint.
    Apply {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Synthesize feature frames for a token sequence and write them as JSON.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        speakers: PathBuf,
        #[arg(long)]
        speaker: String,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<usize>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// SECS between a model's and a reference model's synthesis of one speaker's test sentences.
    EvalSecs {
        #[command(flatten)]
        sources: EvalSources,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Intensity ordering of models built at increasing α.
    EvalIntensity {
        #[command(flatten)]
        sources: EvalSources,
        /// Merged models in ascending α order (at least three).
        #[arg(long, num_args = 3.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        emotion: Emotion,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Run the config's scenarios over existing artifacts.
    RunScenario {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        case: Option<Case>,
    },
    /// Run every stage and every scenario.
    Reproduce(ConfigArgs),
    /// Describe a checkpoint.
    Inspect {
        file: PathBuf,
        /// Add per-tensor norm statistics.
        #[arg(long)]
        stats: bool,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct EvalSources {
    /// Neutral model the outputs are compared against.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    speakers: PathBuf,
    /// Corpus directory the test sentences come from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    speaker: String,
    #[arg(long, default_value_t = 10)]
    sentences: usize,
}

fn pipeline(args: &ConfigArgs) -> Result<Pipeline> {
    let config = ExperimentConfig::load(&args.config)?;
    Pipeline::new(config, args.out.clone())
}

fn weights_of(path: &Path) -> Result<Weights> {
    let set = param_store::load(path)?;
    let config = infer_model_config(&set)?;
    Weights::from_params(&config, &set)
}

/// Recovers the model dimensions from tensor shapes.
fn infer_model_config(set: &ParameterSet) -> Result<ModelConfig> {
    let shape = |name: &str| {
        set.get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::Invalid(format!("not a model checkpoint: no tensor {name:?}")))
    };
    let emb = shape("emb")?;
    let proj = shape("spk.proj")?;
    let w3 = shape("dec.w3")?;
    if emb.len() != 2 || proj.len() != 2 || w3.len() != 2 {
        return Err(Error::Invalid("not a model checkpoint: unexpected tensor ranks".into()));
    }
    Ok(ModelConfig {
        vocab: emb[0],
        embed_dim: emb[1],
        hidden: proj[0],
        speaker_dim: proj[1],
        feature_dim: w3[0],
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("JSON value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

struct EvalContext {
    reference: Weights,
    speaker_vec: Vec<f64>,
    sentences: Vec<Vec<usize>>,
    corpus: Corpus,
}

fn eval_context(src: &EvalSources) -> Result<EvalContext> {
    let corpus = Corpus::load(&src.corpus)?;
    let table = SpeakerTable::load(&src.speakers)?;
    Ok(EvalContext {
        reference: weights_of(&src.reference)?,
        speaker_vec: table.vector(&src.speaker)?.to_vec(),
        sentences: test_sentences(&corpus, &src.speaker, src.sentences)?,
        corpus,
    })
}

fn synthesize(w: &Weights, ctx: &EvalContext) -> Result<Vec<Vec<Frame>>> {
    ctx.sentences.iter().map(|s| w.forward(s, &ctx.speaker_vec)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DatasetGen(args) => {
            pipeline(&args)?.dataset_gen()?;
        }
        Command::TrainEmbedder(args) => {
            pipeline(&args)?.train_embedder()?;
        }
        Command::Pretrain { args, speaker } => {
            pipeline(&args)?.pretrain(speaker.as_deref())?;
        }
        Command::Finetune { args, emotion, speaker } => {
            pipeline(&args)?.finetune(emotion, speaker.as_deref())?;
        }
        Command::ExtractVector {
            emo,
            pre,
            label,
            output,
        } => {
            let tau = extract_vector(&param_store::load(&emo)?, &param_store::load(&pre)?, &label)?;
            param_store::save(tau.as_parameter_set(), &output)?;
            log::info!("wrote {} ({} vector)", output.display(), tau.scope().as_str());
        }
        Command::Apply {
            target,
            vector,
            alpha,
            output,
        } => {
            let tau = emovec_core::EmotionVector::from_parameter_set(param_store::load(&vector)?)?;
            let merged = apply_vector(&param_store::load(&target)?, &tau, alpha)?;
            param_store::save(&merged, &output)?;
            log::info!("wrote {}", output.display());
        }
        Command::Synth {
            model,
            speakers,
            speaker,
            tokens,
            output,
        } => {
            let w = weights_of(&model)?;
            let table = SpeakerTable::load(&speakers)?;
            let frames = w.forward(&tokens, table.vector(&speaker)?)?;
            write_json(
                &output,
                &json!({ "model": model, "speaker": speaker, "tokens": tokens, "frames": frames }),
            )?;
        }
        Command::EvalSecs {
            sources,
            model,
            embedder,
            output,
        } => {
            let ctx = eval_context(&sources)?;
            let embedder = EmbedderModel::from_parameter_set(param_store::load(&embedder)?)?;
            let outputs = synthesize(&weights_of(&model)?, &ctx)?;
            let reference = synthesize(&ctx.reference, &ctx)?;
            let summary = secs_eval(&outputs, &reference, &embedder)?;
            log::info!(
                "SECS {:.4} ± {:.4} over {} sentences",
                summary.summary.mean,
                summary.summary.half_width,
                summary.summary.n
            );
            write_json(&output, &serde_json::to_value(&summary).expect("summary serializes"))?;
        }
        Command::EvalIntensity {
            sources,
            models,
            emotion,
            output,
        } => {
            let ctx = eval_context(&sources)?;
            let estimator = IntensityEstimator::from_corpus(&ctx.corpus, emotion)?;
            let by_alpha = models
                .iter()
                .map(|m| synthesize(&weights_of(m)?, &ctx))
                .collect::<Result<Vec<_>>>()?;
            let neutral = synthesize(&ctx.reference, &ctx)?;
            let summary = intensity_ordering_eval(&by_alpha, &neutral, &estimator)?;
            log::info!(
                "mean diagonal {:.4}, strictly increasing on {:.1}%",
                summary.mean_diagonal,
                100.0 * summary.monotonic_fraction
            );
            write_json(&output, &serde_json::to_value(&summary).expect("summary serializes"))?;
        }
        Command::RunScenario { args, case } => {
            pipeline(&args)?.run_scenarios(case)?;
        }
        Command::Reproduce(args) => {
            pipeline(&args)?.run_all()?;
        }
        Command::Inspect { file, stats, json } => emit(&inspect(&file, stats, json)?)?,
    }
    Ok(())
}

fn inspect(path: &Path, with_stats: bool, as_json: bool) -> Result<String> {
    let set = param_store::load(path)?;
    let stats = with_stats.then(|| parameter_stats(&set));
    if as_json {
        let tensors: Vec<_> = set
            .tensors()
            .map(|t| json!({ "name": t.name(), "shape": t.shape(), "numel": t.numel() }))
            .collect();
        let value = json!({
            "file": path,
            "tensor_hash": set.tensor_hash(),
            "numel": set.numel(),
            "tensors": tensors,
            "meta": set.meta(),
            "stats": stats,
        });
        return Ok(serde_json::to_string_pretty(&value).expect("JSON value serializes") + "\n");
    }
    let mut out = String::new();
    let w = &mut out;
    // Writing to a String cannot fail.
    let _ = writeln!(w, "{}", path.display());
    let _ = writeln!(w, "  tensor hash {}", set.tensor_hash());
    let _ = writeln!(w, "  {} tensors, {} values", set.len(), set.numel());
    for t in set.tensors() {
        let line = format!("    {:<14} {:?}", t.name(), t.shape());
        match stats
            .as_ref()
            .and_then(|s| s.tensors.iter().find(|x| x.name == t.name()))
        {
            Some(s) => writeln!(
                w,
                "{line:<36} l2 {:.6e}  max|v| {:.6e}  near-zero {:.4}",
                s.l2, s.max_abs, s.near_zero_fraction
            ),
            None => writeln!(w, "{line}"),
        }
        .ok();
    }
    if let Some(s) = &stats {
        let _ = writeln!(
            w,
            "  global l2 {:.6e}, max|v| {:.6e}, near-zero {:.4}",
            s.global_l2, s.max_abs, s.near_zero_fraction
        );
    }
    if !set.meta().is_empty() {
        let _ = writeln!(w, "  meta:");
        for (k, v) in set.meta() {
            let _ = writeln!(w, "    {k} = {v}");
        }
    }
    Ok(out)
}

/// Writes to stdout; a reader that hung up early is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("EMOVEC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("EMOVEC_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure {n} worker threads: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

//! Command-line front end. Every step reads and writes files, so a pipeline
//! can be resumed or audited at any stage.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{load_corpus, sample_windows, split_holdout};
use crate::distill::{cache_teacher_logits, distill_patch, DistillConfig, DistillData, DistillLoss, LogitsCache};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::hadamard::build_hadamard;
use crate::model::{train_toy, HiddenTrace, ModelConfig, TrainConfig, TransformerModel};
use crate::numerics::Element;
use crate::patch::{self, build_variant, PatchVariant};
use crate::pruning::{self, PruneMode, PruneSpec};

#[derive(Debug, Parser)]
#[command(name = "linearpatch", version, about = "Layer pruning with a fused Hadamard/scaling patch")]
pub struct Cli {
    /// Print machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy byte-level language model.
    TrainToy(TrainArgs),
    /// Capture layer inputs over calibration windows.
    Trace(TraceArgs),
    /// Choose the layers to remove.
    Select(SelectArgs),
    /// Remove the layers named by a spec.
    Prune(PruneArgs),
    /// Prune and insert interface patches.
    Patch(PatchArgs),
    /// Fine-tune only the patch matrices.
    Distill(DistillArgs),
    /// Cache teacher top-K probabilities.
    CacheLogits(CacheArgs),
    /// Perplexity of one or more checkpoints.
    Eval(EvalArgs),
    /// Activation statistics as CSV.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// MLP width; defaults to four times `--dim`.
    #[arg(long)]
    pub mlp: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration text.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    /// Window length, capped to the model's maximum.
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ContiguousCosine,
    NoncontiguousCosine,
    PplGreedy,
}

impl From<ModeArg> for PruneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ContiguousCosine => PruneMode::ContiguousCosine,
            ModeArg::NoncontiguousCosine => PruneMode::NoncontiguousCosine,
            ModeArg::PplGreedy => PruneMode::PplGreedy,
        }
    }
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Calibration trace (cosine modes).
    #[arg(long, conflicts_with = "corpus")]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration text (cosine modes) or evaluation text (ppl-greedy).
    #[arg(long, requires = "model")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::ContiguousCosine)]
    pub mode: ModeArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the spec as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    /// Dense checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration trace of the dense model.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, value_enum, default_value_t = PatchVariant::Linearpatch)]
    pub variant: PatchVariant,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Patched student checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Teacher cache (KL loss).
    #[arg(long, required_if_eq("loss", "kl"))]
    pub cache: Option<PathBuf>,
    /// Text the cache was computed on (KL loss).
    #[arg(long, required_if_eq("loss", "kl"))]
    pub corpus: Option<PathBuf>,
    /// Dense-model trace (MSE loss).
    #[arg(long, required_if_eq("loss", "mse"))]
    pub trace: Option<PathBuf>,
    /// Prune spec locating the interface (MSE loss).
    #[arg(long, required_if_eq("loss", "mse"))]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5000)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = DistillLoss::Kl)]
    pub loss: DistillLoss,
    /// Train only the diagonal of each patch.
    #[arg(long)]
    pub diag_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Capped to the vocabulary size.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Window length; defaults to the teacher's maximum.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoints; the first is the dense reference.
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluate only the trailing fraction of the corpus.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Window length; defaults to the dense model's maximum.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Mean |activation| per layer and channel.
    Magnitudes {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Raw and rotated scaling spread for every block of `n` layers.
    Sigma {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Only this block start.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Perplexity under `X -> alpha * (X ⊙ d)` at the pruning interface.
    Alpha {
        /// Dense checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0])]
        alphas: Vec<f64>,
        #[arg(long)]
        holdout: Option<f64>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args).and_then(|c| check_usage(&c).map(|()| c)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Argument rules clap cannot express because they depend on defaulted values.
fn check_usage(cli: &Cli) -> std::result::Result<(), clap::Error> {
    if let Command::Distill(a) = &cli.command {
        let missing = match a.loss {
            DistillLoss::Kl if a.cache.is_none() || a.corpus.is_none() => Some("--loss kl requires --cache and --corpus"),
            DistillLoss::Mse if a.trace.is_none() || a.spec.is_none() => Some("--loss mse requires --trace and --spec"),
            _ => None,
        };
        if let Some(msg) = missing {
            return Err(Cli::command().error(ErrorKind::MissingRequiredArgument, format!("distill: {msg}")));
        }
    }
    Ok(())
}

fn emit<R: Serialize>(out: &mut dyn Write, json: bool, value: &R, text: impl FnOnce() -> String) -> Result<()> {
    let s = if json {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format("output", e.to_string()))?;
        s.push('\n');
        s
    } else {
        text()
    };
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn csv_rows<R: Serialize>(out: &mut dyn Write, json: bool, rows: &[R]) -> Result<()> {
    if json {
        return emit(out, true, &rows, String::new);
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))
}

fn load_model(path: &Path) -> Result<TransformerModel<f32>> {
    TransformerModel::load_checkpoint(path)
}

fn mismatch(what: &str, a: &Path, b: &Path, detail: String) -> Error {
    Error::input(format!("{what} of {} and {} disagree: {detail}", a.display(), b.display()))
}

fn holdout_slice(tokens: &[u32], fraction: Option<f64>) -> Result<&[u32]> {
    match fraction {
        None => Ok(tokens),
        Some(f) if f > 0.0 && f <= 1.0 => Ok(split_holdout(tokens, f).1),
        Some(f) => Err(Error::input(format!("holdout fraction {f} must be in (0, 1]"))),
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let json = cli.json;
    match &cli.command {
        Command::TrainToy(a) => {
            let config = ModelConfig {
                n_layers: a.layers,
                hidden_dim: a.dim,
                n_heads: a.heads,
                mlp_dim: a.mlp.unwrap_or(4 * a.dim),
                max_seq_len: a.seq_len,
                ..ModelConfig::default()
            };
            let tokens = load_corpus(&a.corpus)?;
            let mut model = TransformerModel::init(config, a.seed)?;
            let report = train_toy(
                &mut model,
                &tokens,
                &TrainConfig {
                    steps: a.steps,
                    batch_size: a.batch,
                    seq_len: a.seq_len,
                    lr: a.lr,
                    seed: a.seed,
                    ..TrainConfig::default()
                },
            )?;
            model.save_checkpoint(&a.out)?;
            #[derive(Serialize)]
            struct Out {
                steps: usize,
                initial_perplexity: Option<f64>,
                final_perplexity: Option<f64>,
                digest: String,
            }
            let o = Out {
                steps: report.losses.len(),
                initial_perplexity: report.initial_perplexity(),
                final_perplexity: report.final_perplexity(50),
                digest: model.backbone_digest(),
            };
            emit(out, json, &o, || {
                format!(
                    "trained {} steps, perplexity {:.3} -> {:.3}\nwrote {} ({})\n",
                    o.steps,
                    o.initial_perplexity.unwrap_or(f64::NAN),
                    o.final_perplexity.unwrap_or(f64::NAN),
                    a.out.display(),
                    o.digest
                )
            })
        }
        Command::Trace(a) => {
            let model = load_model(&a.model)?;
            let trace = collect_trace(&model, &a.calib, a.samples, a.seq_len, a.seed)?;
            trace.save(&a.out)?;
            #[derive(Serialize)]
            struct Out {
                samples: usize,
                seq_len: usize,
                entries: usize,
            }
            let o = Out {
                samples: trace.batch(),
                seq_len: trace.seq_len(),
                entries: trace.entries().len(),
            };
            emit(out, json, &o, || {
                format!(
                    "traced {} windows of {} tokens ({} entries) to {}\n",
                    o.samples,
                    o.seq_len,
                    o.entries,
                    a.out.display()
                )
            })
        }
        Command::Select(a) => {
            let mode = PruneMode::from(a.mode);
            let spec = match (mode, &a.trace, &a.model, &a.corpus) {
                (PruneMode::PplGreedy, _, Some(m), Some(c)) => {
                    let model = load_model(m)?;
                    let tokens = load_corpus(c)?;
                    let seq = a.seq_len.min(model.config.max_seq_len);
                    pruning::select_ppl_greedy(&model, &tokens, a.n, seq)?
                }
                (PruneMode::PplGreedy, ..) => {
                    return Err(Error::input("ppl-greedy selection needs --model and --corpus"))
                }
                (_, Some(t), _, _) => select_cosine(mode, &HiddenTrace::load(t)?, a.n)?,
                (_, None, Some(m), Some(c)) => {
                    let model = load_model(m)?;
                    select_cosine(mode, &collect_trace(&model, c, a.samples, a.seq_len, a.seed)?, a.n)?
                }
                _ => return Err(Error::input("selection needs --trace, or --model with --corpus")),
            };
            if let Some(path) = &a.out {
                spec.save(path)?;
            }
            emit(out, json, &spec, || {
                let mut s = format!("mode {}, remove {:?}\n", spec.mode.as_str(), spec.selected);
                for c in &spec.candidates {
                    s.push_str(&format!("  round {} layer {:>3}  score {:.6}\n", c.round, c.layer, c.score));
                }
                s
            })
        }
        Command::Prune(a) => {
            let model = load_model(&a.model)?;
            let spec = PruneSpec::load(&a.spec)?;
            spec.validate(model.n_layers())
                .map_err(|e| mismatch("depths", &a.model, &a.spec, e.to_string()))?;
            let pruned = pruning::prune_layers(&model, &spec)?;
            pruned.save_checkpoint(&a.out)?;
            report_model(out, json, &pruned, &a.out)
        }
        Command::Patch(a) => {
            let model = load_model(&a.model)?;
            let trace = HiddenTrace::load(&a.trace)?;
            if trace.n_layers() != model.n_layers() || trace.hidden_dim() != model.hidden_dim() {
                return Err(mismatch(
                    "shapes",
                    &a.model,
                    &a.trace,
                    format!(
                        "{} layers x {} vs {} layers x {}",
                        model.n_layers(),
                        model.hidden_dim(),
                        trace.n_layers(),
                        trace.hidden_dim()
                    ),
                ));
            }
            let spec = PruneSpec::load(&a.spec)?;
            spec.validate(model.n_layers())
                .map_err(|e| mismatch("depths", &a.model, &a.spec, e.to_string()))?;
            let patched = build_variant(&model, &trace, &spec, a.variant)?;
            patched.save_checkpoint(&a.out)?;
            report_model(out, json, &patched, &a.out)
        }
        Command::CacheLogits(a) => {
            let teacher = load_model(&a.teacher)?;
            let tokens = load_corpus(&a.corpus)?;
            let seq = a.seq_len.unwrap_or(teacher.config.max_seq_len);
            let k = a.k.min(teacher.vocab_size());
            let cache = cache_teacher_logits(&teacher, &tokens, seq, k, Some(a.samples))?;
            cache.save(&a.out)?;
            #[derive(Serialize)]
            struct Out {
                k: usize,
                vocab: usize,
                sequences: usize,
                seq_len: usize,
                bytes: usize,
            }
            let o = Out {
                k,
                vocab: cache.vocab(),
                sequences: cache.sequences(),
                seq_len: cache.seq_len(),
                bytes: cache.file_len(),
            };
            emit(out, json, &o, || {
                format!(
                    "cached top-{} of {} for {} x {} positions ({} bytes) to {}\n",
                    o.k,
                    o.vocab,
                    o.sequences,
                    o.seq_len,
                    o.bytes,
                    a.out.display()
                )
            })
        }
        Command::Distill(a) => {
            let mut model = load_model(&a.model)?;
            let config = DistillConfig {
                k: a.k,
                lr: a.lr,
                epochs: a.epochs,
                samples: a.samples,
                batch_size: a.batch,
                loss: a.loss,
                diag_only: a.diag_only,
                seed: a.seed,
                ..DistillConfig::default()
            };
            let report = match a.loss {
                DistillLoss::Kl => {
                    let (cache_path, corpus_path) = (a.cache.as_ref().unwrap(), a.corpus.as_ref().unwrap());
                    let cache = LogitsCache::load(cache_path)?;
                    if cache.vocab() != model.vocab_size() {
                        return Err(mismatch(
                            "vocabularies",
                            &a.model,
                            cache_path,
                            format!("{} vs {}", model.vocab_size(), cache.vocab()),
                        ));
                    }
                    let tokens = load_corpus(corpus_path)?;
                    distill_patch(&mut model, DistillData::TopK { tokens: &tokens, cache: &cache }, &config)?
                }
                DistillLoss::Mse => {
                    let trace = HiddenTrace::load(a.trace.as_ref().unwrap())?;
                    let spec = PruneSpec::load(a.spec.as_ref().unwrap())?;
                    let start = spec
                        .block_start
                        .ok_or_else(|| Error::input("feature alignment needs a contiguous spec"))?;
                    distill_patch(
                        &mut model,
                        DistillData::Features {
                            trace: &trace,
                            start,
                            n: spec.n,
                        },
                        &config,
                    )?
                }
            };
            model.save_checkpoint(&a.out)?;
            #[derive(Serialize)]
            struct Out {
                steps: usize,
                epoch_losses: Vec<f64>,
                backbone_digest: String,
                patch_digest: String,
            }
            let o = Out {
                steps: report.step_losses.len(),
                epoch_losses: report.epoch_losses,
                backbone_digest: model.backbone_digest(),
                patch_digest: model.patch_digest(),
            };
            emit(out, json, &o, || {
                format!(
                    "{} steps, epoch losses {:?}\npatch digest {}\nwrote {}\n",
                    o.steps,
                    o.epoch_losses,
                    o.patch_digest,
                    a.out.display()
                )
            })
        }
        Command::Eval(a) => {
            let tokens = load_corpus(&a.corpus)?;
            let tokens = holdout_slice(&tokens, a.holdout)?;
            let models = a.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let seq = a.seq_len.unwrap_or(models[0].config.max_seq_len);
            let rows = match a.precision {
                Precision::F32 => evaluate(&models, &a.models, tokens, seq)?,
                Precision::F64 => {
                    let wide: Vec<TransformerModel<f64>> = models.iter().map(|m| m.cast()).collect();
                    evaluate(&wide, &a.models, tokens, seq)?
                }
            };
            emit(out, json, &rows, || eval::render_table(&rows))
        }
        Command::Analyze(cmd) => analyze(cmd, json, out),
    }
}

fn evaluate<T: Element>(
    models: &[TransformerModel<T>],
    paths: &[PathBuf],
    tokens: &[u32],
    seq: usize,
) -> Result<Vec<EvalReport>> {
    for (m, p) in models.iter().zip(paths).skip(1) {
        if m.vocab_size() != models[0].vocab_size() {
            return Err(mismatch(
                "vocabularies",
                &paths[0],
                p,
                format!("{} vs {}", models[0].vocab_size(), m.vocab_size()),
            ));
        }
    }
    let variants: Vec<(String, &TransformerModel<T>)> = models
        .iter()
        .zip(paths)
        .skip(1)
        .map(|(m, p)| (p.display().to_string(), m))
        .collect();
    let mut rows = eval::compare_variants(&models[0], &variants, tokens, seq)?;
    rows[0].label = paths[0].display().to_string();
    Ok(rows)
}

fn collect_trace(
    model: &TransformerModel<f32>,
    calib: &Path,
    samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<HiddenTrace<f32>> {
    if samples == 0 {
        return Err(Error::input("--samples must be positive"));
    }
    let tokens = load_corpus(calib)?;
    let seq = seq_len.min(model.config.max_seq_len);
    let windows = sample_windows(&tokens, seq, samples, seed)?;
    HiddenTrace::collect(model, &windows, eval::DEFAULT_EVAL_BATCH)
}

fn select_cosine(mode: PruneMode, trace: &HiddenTrace<f32>, n: usize) -> Result<PruneSpec> {
    match mode {
        PruneMode::NoncontiguousCosine => pruning::select_noncontiguous(trace, n),
        _ => pruning::select_prune_block(trace, n),
    }
}

fn report_model(out: &mut dyn Write, json: bool, model: &TransformerModel<f32>, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Out {
        layers: usize,
        patches: usize,
        backbone_digest: String,
        patch_digest: String,
    }
    let o = Out {
        layers: model.n_layers(),
        patches: model.patch_count(),
        backbone_digest: model.backbone_digest(),
        patch_digest: model.patch_digest(),
    };
    emit(out, json, &o, || {
        format!(
            "{} layers, {} patches, wrote {}\n",
            o.layers,
            o.patches,
            path.display()
        )
    })
}

fn analyze(cmd: &AnalyzeCommand, json: bool, out: &mut dyn Write) -> Result<()> {
    match cmd {
        AnalyzeCommand::Magnitudes { trace } => {
            let trace = HiddenTrace::load(trace)?;
            csv_rows(out, json, &patch::channel_magnitudes(&trace))
        }
        AnalyzeCommand::Sigma { trace, n, start } => {
            let trace = HiddenTrace::load(trace)?;
            if *n == 0 || *n > trace.n_layers() {
                return Err(Error::input(format!("n must be in 1..={}", trace.n_layers())));
            }
            let h = build_hadamard(trace.hidden_dim())?;
            let starts: Vec<usize> = match start {
                Some(s) => vec![*s],
                None => (0..=trace.n_layers() - n).collect(),
            };
            #[derive(Serialize)]
            struct Row {
                start: usize,
                n: usize,
                sigma_raw: f64,
                sigma_rotated: f64,
            }
            let rows = starts
                .into_iter()
                .map(|s| {
                    Ok(Row {
                        start: s,
                        n: *n,
                        sigma_raw: patch::sigma_d(&trace, s, *n, None)?.sigma,
                        sigma_rotated: patch::sigma_d(&trace, s, *n, Some(&h))?.sigma,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            csv_rows(out, json, &rows)
        }
        AnalyzeCommand::Alpha {
            model,
            trace,
            spec,
            corpus,
            alphas,
            holdout,
        } => {
            let dense = load_model(model)?;
            let trace_data = HiddenTrace::load(trace)?;
            let spec_data = PruneSpec::load(spec)?;
            spec_data
                .validate(dense.n_layers())
                .map_err(|e| mismatch("depths", model, spec, e.to_string()))?;
            let start = spec_data
                .block_start
                .ok_or_else(|| Error::input("the alpha study needs a contiguous spec"))?;
            let d = patch::channel_scaling(&trace_data, start, spec_data.n, None)?;
            let pruned = pruning::prune_layers(&dense, &spec_data)?;
            let tokens = load_corpus(corpus)?;
            let tokens = holdout_slice(&tokens, *holdout)?;
            let rows = patch::alpha_sweep(&pruned, start, &d.values, alphas, tokens, dense.config.max_seq_len)?;
            csv_rows(out, json, &rows)
        }
    }
}

//! `ctrlcap`: corpus generation, staged training, evaluation, annotation,
//! scoring, and sampling for the control-conditioned captioner.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigFile;
use ctrlcap_core::captioner::{sample, Checkpoint, DecoderConfig, DecoderParams, ParamNodes};
use ctrlcap_core::control::{
    gt_quality_score, length_level, quality_level, scheme_by_name, tense_level, Annotator,
    ControlSignal, ControlTask, LevelScheme, QualityContext, SchemeKind, SchemeSet,
};
use ctrlcap_core::corpus::{generate_synthetic, load_corpus, save_corpus, Corpus, Split, SynthConfig};
use ctrlcap_core::error::{Error, Result};
use ctrlcap_core::evaluation::{bleu, evaluate, render_table, Protocol, SignalSource};
use ctrlcap_core::rewards::{build_ngram_stats, cider_d, CiderOpts, NgramStats};
use ctrlcap_core::tape::Tape;
use ctrlcap_core::training::{train, Stage, TrainConfig, TrainInit};
use ctrlcap_core::util::stream_rng;

#[derive(Parser)]
#[command(name = "ctrlcap", version, about = "Structure-controlled caption training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic controllable-caption corpus.
    GenData(GenDataArgs),
    /// Run one training stage (xe, rl, sat, or finetune).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Annotate every corpus caption with its control level.
    Annotate(AnnotateArgs),
    /// Score candidate captions against references.
    Score(ScoreArgs),
    /// Draw samples from a checkpoint for one image and signal.
    Sample(SampleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Scheme preset name(s), comma separated (e.g. `length-fine` or
    /// `length-coarse,tense`); defaults follow the task.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Length penalty inside the training reward: on|off.
    #[arg(long)]
    length_penalty: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `fresh` or a checkpoint path.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    /// Clip finetune advantages at zero like SAT (default keeps the
    /// conventional signed form).
    #[arg(long)]
    clip_finetune: bool,
    #[arg(long, env = "CTRLCAP_THREADS")]
    threads: Option<usize>,
    /// Flat key=value overlay; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suppress timestamp header fields for byte-identical reruns.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "1to5")]
    protocol: String,
    /// `gt` or `fixed:<level-spec>`.
    #[arg(long, default_value = "gt")]
    signal_source: String,
    #[arg(long, default_value_t = 2)]
    beam: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, env = "CTRLCAP_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    scheme: String,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long, default_value = "cider")]
    metric: String,
    #[arg(long, default_value = "on")]
    length_penalty: String,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    image_id: String,
    /// Level-spec: `len=<int>[,tense=<int>][,quality=<int>]`.
    #[arg(long)]
    signal: String,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            eprintln!("error: {kind}: {err}");
            ExitCode::from(code)
        }
    }
}

/// Error classes map to distinct exit codes: 3 scheme/level problems,
/// 4 vocab-hash mismatches, 5 file/data problems, 1 everything else
/// (clap itself exits 2 on usage errors).
fn classify(err: &Error) -> (&'static str, u8) {
    match err {
        Error::Config(_) | Error::LevelOutOfRange { .. } | Error::ComponentMismatch(_) => {
            ("scheme", 3)
        }
        Error::VocabHashMismatch { .. } => ("vocab-hash", 4),
        Error::Io(_)
        | Error::Parse { .. }
        | Error::EmptyCorpus
        | Error::UnknownToken(_)
        | Error::InvalidCaption(_) => ("data", 5),
        _ => ("internal", 1),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Annotate(args) => cmd_annotate(args),
        Command::Score(args) => cmd_score(args),
        Command::Sample(args) => cmd_sample(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let corpus = generate_synthetic(&SynthConfig {
        num_images: args.images,
        refs_per_image: args.refs,
        seed: args.seed,
        feature_dim: args.feature_dim,
        noise_std: args.noise_std,
    })?;
    save_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} images x {} refs to {}",
        args.images,
        args.refs,
        args.out.display()
    );
    Ok(())
}

/// Resolve the scheme set for a task from an optional comma-separated
/// preset list. Quality presets imply their ground-truth pairing.
fn resolve_schemes(task: ControlTask, arg: Option<&str>) -> Result<SchemeSet> {
    let Some(arg) = arg else {
        return SchemeSet::for_task(task);
    };
    let named: Vec<LevelScheme> = arg
        .split(',')
        .map(|name| scheme_by_name(name.trim()))
        .collect::<Result<_>>()?;
    let find = |kinds: &[SchemeKind]| {
        named
            .iter()
            .find(|s| kinds.contains(&s.kind))
            .cloned()
    };
    let length = find(&[SchemeKind::LengthCoarse, SchemeKind::LengthFine, SchemeKind::Custom]);
    let tense = find(&[SchemeKind::Tense]);
    let quality_pair = || -> Result<Option<(LevelScheme, LevelScheme)>> {
        let quals: Vec<&LevelScheme> = named
            .iter()
            .filter(|s| s.kind == SchemeKind::Quality)
            .collect();
        match quals.len() {
            0 => Ok(None),
            1 => {
                let gen = quals[0].clone();
                let gt = match gen.name.as_str() {
                    "quality-updown-5" => scheme_by_name("quality-gt-5")?,
                    "quality-transformer-3" => scheme_by_name("quality-gt-3")?,
                    other => {
                        return Err(Error::Config(format!(
                            "name a generated-caption quality scheme, got {other:?}"
                        )))
                    }
                };
                Ok(Some((gen, gt)))
            }
            2 => {
                let gen = quals
                    .iter()
                    .find(|s| !s.name.starts_with("quality-gt"))
                    .ok_or_else(|| Error::Config("two gt quality schemes given".into()))?;
                let gt = quals
                    .iter()
                    .find(|s| s.name.starts_with("quality-gt"))
                    .ok_or_else(|| Error::Config("two generated quality schemes given".into()))?;
                Ok(Some(((*gen).clone(), (*gt).clone())))
            }
            n => Err(Error::Config(format!("{n} quality schemes given"))),
        }
    };
    match task {
        ControlTask::Length => SchemeSet::new(
            task,
            Some(length.ok_or_else(|| Error::Config("length task needs a length scheme".into()))?),
            None,
            None,
        ),
        ControlTask::Tense => SchemeSet::new(
            task,
            None,
            Some(tense.ok_or_else(|| Error::Config("tense task needs the tense scheme".into()))?),
            None,
        ),
        ControlTask::LengthTense => SchemeSet::new(
            task,
            Some(length.ok_or_else(|| Error::Config("length+tense task needs a length scheme".into()))?),
            Some(tense.unwrap_or_else(ctrlcap_core::control::tense_scheme)),
            None,
        ),
        ControlTask::Quality => SchemeSet::new(
            task,
            None,
            None,
            Some(
                quality_pair()?
                    .ok_or_else(|| Error::Config("quality task needs a quality scheme".into()))?,
            ),
        ),
        ControlTask::Uncontrolled => SchemeSet::new(task, None, None, None),
    }
}

fn parse_on_off(value: &str, flag: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Config(format!("{flag} must be on|off, got {other:?}"))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let overlay = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let stage_name = args
        .stage
        .or(overlay.get("stage").map(str::to_string))
        .ok_or_else(|| Error::Config("--stage is required".into()))?;
    let stage = Stage::parse(&stage_name)?;
    let task_name = args
        .task
        .or(overlay.get("task").map(str::to_string))
        .unwrap_or_else(|| "length".to_string());
    let task = ControlTask::parse(&task_name)?;
    let corpus_path = args
        .corpus
        .or(overlay.get("corpus").map(PathBuf::from))
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let scheme_arg = args.scheme.or(overlay.get("scheme").map(str::to_string));
    let init_arg = args
        .init
        .or(overlay.get("init").map(str::to_string))
        .unwrap_or_else(|| "fresh".to_string());

    let mut cfg = TrainConfig::new(stage, task)?;
    cfg.schemes = resolve_schemes(task, scheme_arg.as_deref())?;
    cfg.epochs = overlay.resolve(args.epochs, "epochs")?.unwrap_or(cfg.epochs);
    cfg.learning_rate = overlay.resolve(args.lr, "lr")?.unwrap_or(cfg.learning_rate);
    cfg.lambda = overlay.resolve(args.lambda, "lambda")?.unwrap_or(cfg.lambda);
    cfg.seed = overlay.resolve(args.seed, "seed")?.unwrap_or(0);
    cfg.batch_size = overlay
        .resolve(args.batch_size, "batch_size")?
        .unwrap_or(cfg.batch_size);
    cfg.hidden_dim = overlay
        .resolve(args.hidden_dim, "hidden_dim")?
        .unwrap_or(cfg.hidden_dim);
    cfg.dropout_rate = overlay.resolve(args.dropout, "dropout")?.unwrap_or(cfg.dropout_rate);
    cfg.max_len = overlay.resolve(args.max_len, "max_len")?.unwrap_or(cfg.max_len);
    cfg.beam_width = overlay.resolve(args.beam, "beam")?.unwrap_or(cfg.beam_width);
    cfg.threads = overlay.resolve(args.threads, "threads")?.unwrap_or(1);
    cfg.clip_finetune_advantages = args.clip_finetune
        || overlay
            .get("clip_finetune")
            .map(|v| parse_on_off(v, "clip_finetune"))
            .transpose()?
            .unwrap_or(false);
    let penalty_arg = args
        .length_penalty
        .or(overlay.get("length_penalty").map(str::to_string));
    if let Some(p) = penalty_arg {
        cfg.reward_length_penalty = parse_on_off(&p, "--length-penalty")?;
    }

    let corpus = load_corpus(&corpus_path)?;
    let init = match init_arg.as_str() {
        "fresh" => TrainInit::Fresh,
        path => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            ckpt.verify_vocab(&corpus)?;
            TrainInit::Resume(Box::new(ckpt))
        }
    };

    let out_dir = args.out_dir.or(overlay.get("out_dir").map(PathBuf::from));
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics_header(
            &dir.join("metrics.csv"),
            &[
                ("stage", stage.name().to_string()),
                ("task", task.name().to_string()),
                ("scheme", cfg.schemes.scheme_names().join(",")),
                ("corpus", corpus_path.display().to_string()),
                ("epochs", cfg.epochs.to_string()),
                ("lr", format!("{}", cfg.learning_rate)),
                ("lambda", format!("{}", cfg.lambda)),
                ("length_penalty", on_off(cfg.reward_length_penalty)),
                ("clip_finetune", on_off(cfg.clip_finetune_advantages)),
                ("seed", cfg.seed.to_string()),
                ("batch_size", cfg.batch_size.to_string()),
                ("hidden_dim", cfg.hidden_dim.to_string()),
                ("dropout", format!("{}", cfg.dropout_rate)),
                ("max_len", cfg.max_len.to_string()),
                ("beam", cfg.beam_width.to_string()),
                ("threads", cfg.threads.to_string()),
                ("init", init_arg.clone()),
            ],
            args.deterministic,
        )?;
    }

    let outcome = train(&cfg, &corpus, init, out_dir.as_deref())?;
    for row in &outcome.metrics {
        println!("{}", row.csv_row());
    }
    if let Some(path) = outcome.final_checkpoint {
        println!("final checkpoint: {}", path.display());
    }
    Ok(())
}

fn on_off(v: bool) -> String {
    if v { "on" } else { "off" }.to_string()
}

fn write_metrics_header(path: &Path, entries: &[(&str, String)], deterministic: bool) -> Result<()> {
    if path.exists() && std::fs::metadata(path)?.len() > 0 {
        return Ok(()); // resuming: keep the existing log intact
    }
    let mut f = std::fs::File::create(path)?;
    if !deterministic {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(f, "# generated_at = {now}")?;
    }
    for (key, value) in entries {
        writeln!(f, "# {key} = {value}")?;
    }
    Ok(())
}

/// Annotator mirroring the checkpoint's task, with quality statistics over
/// the given split when the task needs them.
fn annotator_for(ckpt: &Checkpoint, corpus: &Corpus, indices: &[usize]) -> Annotator {
    let mut annotator = Annotator::new(ckpt.schemes.clone(), corpus.tags.clone());
    if ckpt.schemes.task == ControlTask::Quality {
        annotator = annotator.with_quality(QualityContext {
            stats: ctrlcap_core::rewards::build_ngram_stats_subset(corpus, indices),
            sample_opts: CiderOpts::training(),
        });
    }
    annotator
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    ckpt.verify_vocab(&corpus)?;
    let protocol = Protocol::parse(&args.protocol)?;
    let source = SignalSource::parse(&args.signal_source)?;
    let split = Split::parse(&args.split)?;
    let indices = corpus.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split {:?} is empty", args.split)));
    }
    let params = ckpt.decoder_params()?;
    let annotator = annotator_for(&ckpt, &corpus, &indices);
    let report = evaluate(
        &params,
        &ckpt.config,
        &annotator,
        &corpus,
        &indices,
        protocol,
        &source,
        args.beam,
        args.threads,
    )?;
    print!("{}", render_table(&[&report]));
    for (signal, (matches, total)) in &report.per_level {
        println!("  level {signal:<24} {matches}/{total}");
    }
    if let Some(path) = args.csv {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", ctrlcap_core::evaluation::EvalReport::CSV_HEADER)?;
        writeln!(f, "{}", report.csv_row())?;
    }
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let scheme = scheme_by_name(&args.scheme)?;
    let stats: Option<NgramStats> = matches!(scheme.kind, SchemeKind::Quality)
        .then(|| build_ngram_stats(&corpus));
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for image in &corpus.images {
        for (r, tokens) in image.refs.iter().enumerate() {
            let level = match scheme.kind {
                SchemeKind::Tense => tense_level(tokens, &corpus.tags)?,
                SchemeKind::Quality => {
                    let score = gt_quality_score(r, &image.refs, stats.as_ref().unwrap())?;
                    quality_level(score, &scheme)?
                }
                _ => length_level(tokens.len(), &scheme)?,
            };
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "id": image.id,
                    "ref": r,
                    "scheme": scheme.name,
                    "level": level,
                })
            )?;
        }
    }
    Ok(())
}

type ScoreInputs = (Vec<Vec<u32>>, Vec<Vec<Vec<u32>>>);

/// Candidate files hold one whitespace-tokenized caption per line; the
/// reference file pairs each line with `||`-separated references. Tokens
/// are interned into a file-local id space.
fn read_score_files(args: &ScoreArgs) -> Result<ScoreInputs> {
    let mut intern: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    let mut id_of = move |tok: &str| -> u32 {
        let next = intern.len() as u32;
        *intern.entry(tok.to_string()).or_insert(next)
    };
    let cand_text = std::fs::read_to_string(&args.candidates)?;
    let ref_text = std::fs::read_to_string(&args.refs)?;
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for line in cand_text.lines() {
        candidates.push(line.split_whitespace().map(&mut id_of).collect());
    }
    for line in ref_text.lines() {
        let refs: Vec<Vec<u32>> = line
            .split("||")
            .map(|r| r.split_whitespace().map(&mut id_of).collect())
            .filter(|r: &Vec<u32>| !r.is_empty())
            .collect();
        references.push(refs);
    }
    if candidates.len() != references.len() {
        return Err(Error::Config(format!(
            "{} candidate lines vs {} reference lines",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((candidates, references))
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let penalty = parse_on_off(&args.length_penalty, "--length-penalty")?;
    let (candidates, references) = read_score_files(&args)?;
    match args.metric.as_str() {
        "cider" => {
            let stats = NgramStats::from_ref_sets(references.iter().map(|r| r.as_slice()));
            let opts = CiderOpts {
                sigma: 6.0,
                use_length_penalty: penalty,
                scale: 10.0,
            };
            let mut total = 0.0;
            for (i, (cand, refs)) in candidates.iter().zip(&references).enumerate() {
                let score = cider_d(cand, refs, &stats, &opts);
                println!("{i}\t{score:.6}");
                total += score;
            }
            println!("mean\t{:.6}", total / candidates.len() as f64);
        }
        "bleu" => {
            let mut totals = [0.0f64; 4];
            for (i, (cand, refs)) in candidates.iter().zip(&references).enumerate() {
                let scores = bleu(cand, refs, 4);
                println!(
                    "{i}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    scores[0], scores[1], scores[2], scores[3]
                );
                for (t, s) in totals.iter_mut().zip(&scores) {
                    *t += s;
                }
            }
            let n = candidates.len() as f64;
            println!(
                "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                totals[0] / n,
                totals[1] / n,
                totals[2] / n,
                totals[3] / n
            );
        }
        other => return Err(Error::Config(format!("unknown metric {other:?}"))),
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    ckpt.verify_vocab(&corpus)?;
    let image = corpus
        .image_by_id(&args.image_id)
        .ok_or_else(|| Error::Config(format!("image id {:?} not in corpus", args.image_id)))?;
    let signal = ControlSignal::parse_spec(&args.signal)?;
    ckpt.schemes.embedding_rows(&signal)?; // level/scheme validation
    let params: DecoderParams = ckpt.decoder_params()?;
    // Inference-style sampling: dropout off.
    let mut cfg: DecoderConfig = ckpt.config.clone();
    cfg.dropout_rate = 0.0;
    let indices: Vec<usize> = (0..corpus.images.len()).collect();
    let annotator = annotator_for(&ckpt, &corpus, &indices);
    let mut rng = stream_rng(args.seed, &[0x5a]);
    for _ in 0..args.n {
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let s = sample(
            &mut tape,
            &pn,
            &cfg,
            &annotator,
            image,
            Some(&signal),
            &mut rng,
            cfg.max_len,
        )?;
        let caption = corpus.tokens_to_string(s.rollout.caption());
        let annotated = s.rollout.self_signal.map(|sig| sig.to_string());
        println!(
            "{}",
            serde_json::json!({
                "caption": caption,
                "requested": signal.to_string(),
                "annotated": annotated,
                "log_prob": s.rollout.seq_log_prob,
            })
        );
    }
    Ok(())
}

//! `sevlm` command-line tool.

mod config;
mod image;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;
use sevlm::checkpoint::Checkpoint;
use sevlm::data::{encode_samples, generate_synthetic, load_dataset, split_dataset, write_dataset, ImageSource, Sample, Split};
use sevlm::diagnostics::{gradcheck_model, GradcheckConfig};
use sevlm::experiment::predict;
use sevlm::generation::{GenerationConfig, Generator};
use sevlm::metrics::{evaluate, paired_bootstrap_scores, EaClassifier, Prediction};
use sevlm::model::{Batch, Example};
use sevlm::vision::ImageFeatures;
use sevlm::{Sevlm, Tensor, Trainer, VadLexicon};

use config::{layered, RunConfig};

/// Environment variable holding the worker-thread count.
const THREADS_ENV: &str = "SEVLM_THREADS";
/// Environment variable holding the log filter (`error` … `trace`).
const LOG_ENV: &str = "SEVLM_LOG";

#[derive(Parser)]
#[command(name = "sevlm", version, about = "Train, sample and evaluate a small emotional vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a JSONL step log.
    Train(TrainArgs),
    /// Score predictions against gold samples.
    Eval(EvalArgs),
    /// Predict the emotion of an image and explain it.
    Generate(GenerateArgs),
    /// Compare backpropagated gradients of the full objective with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus of toy images.
    SynthData(SynthArgs),
    /// Query the VAD lexicon.
    Lexicon {
        #[command(subcommand)]
        command: LexiconCommand,
    },
    /// Dump pooled image, prompt and explanation embeddings.
    ExportEmbeddings(ExportArgs),
    /// Convert images to and from precomputed patch features.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings the file and overrides apply to.
    #[arg(long, default_value = "toy", value_parser = ["toy", "full"])]
    preset: String,
    /// Dotted override such as `train.alpha=1.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSONL corpus; overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, the step log and the effective config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint. Model and training settings come from the
    /// checkpoint; only the step target may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Seeds model initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_vad_fusion: bool,
    #[arg(long)]
    no_vad_head: bool,
    #[arg(long)]
    no_contrastive: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions JSONL (`image_id`, `emotion`, `explanation`).
    #[arg(long)]
    pred: PathBuf,
    /// Gold corpus JSONL.
    #[arg(long)]
    gold: PathBuf,
    /// Where to write the full report.
    #[arg(long)]
    report: PathBuf,
    /// Score only gold samples of this split.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Second system for a paired bootstrap test on ACC and EA.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file, toy-image spec (.json) or binary PPM.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    /// Generate for every sample of a corpus instead of one image.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, requires = "data")]
    split: Option<Split>,
    /// Predictions JSONL for `--data`; stdout when absent.
    #[arg(long, requires = "data")]
    out: Option<PathBuf>,
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// TOML or JSON gradcheck settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
    /// Also record a train/val/test split drawn with this seed.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Subcommand)]
enum LexiconCommand {
    /// Print the VAD vector of a word.
    Inspect {
        word: String,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Run a checkpoint's patch featurizer over a corpus and write feature
    /// files plus a corpus that points at them.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Convert an external feature matrix (JSON rows, or raw little-endian
    /// f32 with `--shape`) to a feature file.
    Import {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `K,D` for raw input.
        #[arg(long)]
        shape: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown split `{s}` (train, val, test)"))
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

fn lexicon_from(path: Option<&Path>) -> anyhow::Result<VadLexicon> {
    Ok(match path {
        Some(p) => VadLexicon::load(p)?,
        None => VadLexicon::bundled(),
    })
}

fn jsonl_writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn filter_split(samples: Vec<Sample>, split: Option<Split>, seed: u64) -> anyhow::Result<Vec<Sample>> {
    let Some(want) = split else { return Ok(samples) };
    let sets = split_dataset(&samples, seed)?;
    let idx = match want {
        Split::Train => sets.train,
        Split::Val => sets.val,
        Split::Test => sets.test,
    };
    Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let base = RunConfig::preset(&args.config.preset)?;
    let mut cfg: RunConfig = layered(&base, args.config.config.as_deref(), &args.config.overrides)?;
    if let Some(d) = args.data {
        cfg.data.path = Some(d);
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    // Disabled components are not built at all, so the parameter set matches
    // a baseline build.
    for (off, slot_m, slot_t) in [
        (args.no_vad_fusion, &mut cfg.model.components.vad_fusion, &mut cfg.train.flags.vad_fusion),
        (args.no_vad_head, &mut cfg.model.components.vad_head, &mut cfg.train.flags.vad_head),
        (args.no_contrastive, &mut cfg.model.components.contrastive, &mut cfg.train.flags.contrastive),
    ] {
        if off {
            *slot_m = false;
            *slot_t = false;
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let echoed = serde_json::to_string(&cfg)?;
    info!("effective config {echoed}");
    if args.dry_run {
        println!("{echoed}");
        return Ok(());
    }

    let data_path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| anyhow!("no corpus given: pass --data or set data.path"))?;
    let samples = load_dataset(&data_path)?;
    let sets = split_dataset(&samples, cfg.data.split_seed)?;
    let train_set: Vec<Sample> = sets.train.iter().map(|&i| samples[i].clone()).collect();
    if train_set.is_empty() {
        bail!("the training split of {} is empty", data_path.display());
    }
    let full_lexicon = lexicon_from(cfg.data.lexicon.as_deref())?;

    let (mut trainer, vocab) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            let mut trainer = ck.trainer;
            if let Some(s) = args.steps {
                trainer.config.steps = s;
            }
            info!("resumed from {} at step {}", p.display(), trainer.step());
            (trainer, ck.vocab)
        }
        None => {
            let vocab = sevlm::data::build_vocab(&train_set);
            let model = Sevlm::<f32>::new(cfg.model.clone(), vocab.len())?;
            (Trainer::new(model, cfg.train.clone())?, vocab)
        }
    };
    let examples: Vec<Example<f32>> = encode_samples(&train_set, &vocab, &full_lexicon, &trainer.model.config)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let effective = json!({ "run": cfg, "model": trainer.model.config, "train": trainer.config });
    std::fs::write(args.out.join("config.json"), serde_json::to_vec_pretty(&effective)?)?;
    let ckpt_path = args.out.join("checkpoint.bin");
    let log_path = args.out.join("train_log.jsonl");
    let mut log = if args.resume.is_some() {
        BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?)
    } else {
        jsonl_writer(&log_path)?
    };
    let mut write_err = None;
    let result = trainer.run(
        &examples,
        |entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            info!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        },
        |t| Checkpoint::new(t.clone(), vocab.clone(), &full_lexicon).save(&ckpt_path),
    );
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing the step log");
    }
    if let Err(e) = result {
        let abort = args.out.join("abort.ckpt");
        Checkpoint::new(trainer.clone(), vocab.clone(), &full_lexicon).save(&abort)?;
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped after step {}; state saved to {}",
            trainer.step(),
            abort.display()
        )));
    }
    Checkpoint::new(trainer.clone(), vocab, &full_lexicon).save(&ckpt_path)?;
    println!(
        "{}",
        json!({ "steps": trainer.step(), "checkpoint": ckpt_path, "log": log_path })
    );
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let preds = read_predictions(&args.pred)?;
    let golds = filter_split(load_dataset(&args.gold)?, args.split, 0)?;
    let classifier = EaClassifier::new(lexicon_from(args.lexicon.as_deref())?);
    let report = evaluate(&preds, &golds, &classifier)?;
    let mut summary = json!({
        "n": report.n, "acc": report.acc, "ea": report.ea, "bleu": report.bleu,
        "rouge_l": report.rouge_l, "unique": report.unique,
    });
    if let Some(other) = &args.compare {
        let b = evaluate(&read_predictions(other)?, &golds, &classifier)?;
        let score = |r: &sevlm::metrics::EvalReport, f: fn(&sevlm::metrics::EvalRecord) -> bool| -> Vec<f64> {
            r.records.iter().map(|x| f64::from(u8::from(f(x)))).collect()
        };
        let acc_of = |x: &sevlm::metrics::EvalRecord| x.predicted == x.gold;
        let ea_of = |x: &sevlm::metrics::EvalRecord| x.deduced == x.gold;
        let p_acc = paired_bootstrap_scores(&score(&report, acc_of), &score(&b, acc_of), args.iters, args.bootstrap_seed)?;
        let p_ea = paired_bootstrap_scores(&score(&report, ea_of), &score(&b, ea_of), args.iters, args.bootstrap_seed)?;
        summary["compare"] = json!({ "acc": b.acc, "ea": b.ea, "p_acc": p_acc, "p_ea": p_ea });
    }
    std::fs::write(&args.report, serde_json::to_vec_pretty(&json!({ "summary": summary, "report": report }))?)
        .with_context(|| format!("writing {}", args.report.display()))?;
    println!("{summary}");
    Ok(())
}

fn generation_config(args: &GenerateArgs, base: &GenerationConfig) -> GenerationConfig {
    GenerationConfig {
        greedy: args.greedy || base.greedy,
        top_p: args.top_p.unwrap_or(base.top_p),
        seed: args.seed.unwrap_or(base.seed),
        temperature: args.temperature.unwrap_or(base.temperature),
        max_new_tokens: args.max_new_tokens.or(base.max_new_tokens),
        ..base.clone()
    }
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let model = ck.model();
    let fusion = model.active(ck.trainer.config.flags)?.vad_fusion;
    let cfg = generation_config(&args, &GenerationConfig::default());
    cfg.validate()?;
    if let Some(path) = &args.image {
        let (input, is_patches) = image::load_input(path, &model.config)?;
        let r = Generator::new(model, &ck.vocab, &ck.lexicon, fusion).generate(&input, is_patches, &cfg)?;
        println!("{}", json!({ "emotion": r.emotion, "explanation": r.explanation }));
        return Ok(());
    }
    let data = args.data.as_ref().expect("clap requires --image or --data");
    let samples = filter_split(load_dataset(data)?, args.split, 0)?;
    let examples: Vec<Example<f32>> = encode_samples(&samples, &ck.vocab, &ck.lexicon, &model.config)?;
    let preds = predict(model, &ck.vocab, &ck.lexicon, &samples, &examples, fusion, &cfg, threads()?)?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(jsonl_writer(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for p in &preds {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg: GradcheckConfig = layered(&GradcheckConfig::default(), args.config.as_deref(), &args.overrides)?;
    info!("effective config {}", serde_json::to_string(&cfg)?);
    let outcome = gradcheck_model(&cfg)?;
    println!("{}", serde_json::to_string(&outcome)?);
    if !outcome.passed {
        bail!(
            "max relative error {:.3e} at {:?} exceeds {:e}",
            outcome.report.max_rel_err,
            outcome.report.worst,
            cfg.tolerance
        );
    }
    Ok(())
}

fn synth_data(args: SynthArgs) -> anyhow::Result<()> {
    let d = sevlm::data::SyntheticSpec::default();
    let spec = sevlm::data::SyntheticSpec {
        size: args.size.unwrap_or(d.size),
        seed: args.seed.unwrap_or(d.seed),
        image_size: args.image_size.unwrap_or(d.image_size),
        noise: args.noise.unwrap_or(d.noise),
    };
    let mut samples = generate_synthetic(&spec);
    if let Some(seed) = args.split_seed {
        let sets = split_dataset(&samples, seed)?;
        for (idx, split) in [(sets.train, Split::Train), (sets.val, Split::Val), (sets.test, Split::Test)] {
            for i in idx {
                samples[i].split = Some(split);
            }
        }
    }
    write_dataset(&args.out, &samples)?;
    println!("{}", json!({ "samples": samples.len(), "out": args.out, "spec": spec }));
    Ok(())
}

fn lexicon(cmd: LexiconCommand) -> anyhow::Result<()> {
    let LexiconCommand::Inspect { word, lexicon } = cmd;
    let lex = lexicon_from(lexicon.as_deref())?;
    let key = sevlm::text::normalize(&word);
    let hit = lex.get(&key);
    let v = lex.lookup(&key);
    println!(
        "{}",
        json!({ "word": key, "in_lexicon": hit.is_some(), "valence": v.valence, "arousal": v.arousal, "dominance": v.dominance })
    );
    Ok(())
}

fn export_embeddings(args: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let model = ck.model();
    let fusion = model.active(ck.trainer.config.flags)?.vad_fusion;
    let samples = filter_split(load_dataset(&args.data)?, args.split, 0)?;
    let examples: Vec<Example<f32>> = encode_samples(&samples, &ck.vocab, &ck.lexicon, &model.config)?;
    let mut out = jsonl_writer(&args.out)?;
    for (s, e) in samples.iter().zip(&examples) {
        let batch = Batch::new(&[e])?;
        let mut ctx = model.eval_ctx();
        let (h, f_i) = model.hidden(&mut ctx, &batch.sentences, &batch.vad, &batch.images, fusion)?;
        let (i, m, x) = model.pooled(&mut ctx, h, f_i, &batch.sentences)?;
        let row = |v| ctx.tape.value(v).data().to_vec();
        let line = json!({
            "image_id": s.image_id, "emotion": s.emotion,
            "image": row(i), "prompt": row(m), "explanation": row(x),
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    println!("{}", json!({ "samples": samples.len(), "out": args.out }));
    Ok(())
}

fn features(cmd: FeaturesCommand) -> anyhow::Result<()> {
    match cmd {
        FeaturesCommand::Export { checkpoint, data, out_dir } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let model = ck.model();
            let fz = model
                .featurizer
                .as_ref()
                .ok_or_else(|| anyhow!("the checkpoint has no patch featurizer"))?;
            let samples = load_dataset(&data)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let mut written = std::collections::BTreeMap::new();
            let mut converted = Vec::with_capacity(samples.len());
            for s in samples {
                let ImageSource::Toy(spec) = &s.image else {
                    bail!("sample `{}` already refers to a feature file", s.image_id);
                };
                let file = format!("{}.svf", sanitize(&s.image_id));
                if !written.contains_key(&s.image_id) {
                    let f = fz.featurize(&model.params, &s.image_id, &spec.render())?;
                    f.save(out_dir.join(&file))?;
                    written.insert(s.image_id.clone(), file.clone());
                }
                converted.push(Sample {
                    image: ImageSource::Features(PathBuf::from(file)),
                    ..s
                });
            }
            let corpus = out_dir.join("data.jsonl");
            write_dataset(&corpus, &converted)?;
            println!("{}", json!({ "images": written.len(), "samples": converted.len(), "corpus": corpus }));
        }
        FeaturesCommand::Import { input, out, shape } => {
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let patches = match shape {
                Some(s) => {
                    let (k, d) = s
                        .split_once(',')
                        .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
                        .ok_or_else(|| anyhow!("--shape must be K,D"))?;
                    if bytes.len() != k * d * 4 {
                        bail!("{} holds {} bytes, shape {k}x{d} needs {}", input.display(), bytes.len(), k * d * 4);
                    }
                    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Tensor::new(vec![k, d], data)?
                }
                None => {
                    let rows: Vec<Vec<f32>> = serde_json::from_slice(&bytes)
                        .with_context(|| format!("{} is not a JSON matrix; pass --shape for raw f32", input.display()))?;
                    let d = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != d) {
                        bail!("ragged feature rows in {}", input.display());
                    }
                    Tensor::new(vec![rows.len(), d], rows.concat())?
                }
            };
            let id = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let f = ImageFeatures::new(id, patches)?;
            f.save(&out)?;
            println!("{}", json!({ "patches": f.num_patches(), "width": f.width(), "out": out }));
        }
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Short machine-readable category of an error chain.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use sevlm::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Shape(_) | E::DimMismatch { .. } | E::Index { .. } | E::LengthMismatch(..) => "shape",
                E::EmptyReduction(_) | E::EmptySequence(_) => "empty",
                E::Parse { .. } | E::Json(_) => "parse",
                E::Validation(_) | E::UnknownClass(_) | E::MissingNegative(_) => "validation",
                E::Config(_) => "config",
                E::Format(_) => "format",
                E::NonFinite(_) => "non_finite",
                E::Io { .. } => "io",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = json!({ "level": record.level().as_str(), "target": record.target(), "msg": record.args().to_string() });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthData(a) => synth_data(a),
        Command::Lexicon { command } => lexicon(command),
        Command::ExportEmbeddings(a) => export_embeddings(a),
        Command::Features { command } => features(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = message(&e);
            eprintln!("{}", json!({ "error": error_kind(&e), "message": msg }));
            ExitCode::FAILURE
        }
    }
}

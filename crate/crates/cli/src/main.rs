use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spa_core::diffusion::DiffusionModel;
use spa_core::embedding::{load_embedding_pair, load_labels, load_reference_set, maybe_normalize, parse_labels};
use spa_core::fewshot::FewShotClassifier;
use spa_core::metrics::{evaluate, report, NamedMetrics};
use spa_core::pipeline::{
    load_graph, make_bench, run_infer, train_classifier, train_diffusion_from_graph, write_bench, BenchConfig,
    InferenceContext, Prediction, RunConfig,
};
use spa_core::task_graph::PhaseSequence;
use spa_core::SpaError;

#[derive(Parser)]
#[command(name = "spa", version, about = "Few-shot surgical phase recognition on precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark with per-video drift.
    SynthBench(SynthBenchArgs),
    /// Task graph utilities.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Train the text-blended few-shot classifier on reference embeddings.
    TrainFewshot(TrainFewshotArgs),
    /// Train the sequence diffusion prior on sequences sampled from a task graph.
    TrainDiffusion(TrainDiffusionArgs),
    /// Predict per-frame phases for one video.
    Infer(InferArgs),
    /// Score one prediction against ground-truth labels.
    Eval(EvalArgs),
    /// Aggregate per-video metrics into a report.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Parse a graph, and optionally check a label sequence against it.
    Validate {
        #[arg(long)]
        graph: PathBuf,
        /// Label file, one phase index per line.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        allow_truncated_tail: bool,
    },
}

#[derive(Args)]
struct SynthBenchArgs {
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 0.4)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    fewshot_noise: Option<f64>,
    #[arg(long)]
    modality_gap: Option<f64>,
    #[arg(long)]
    min_separation: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFewshotArgs {
    /// Reference manifest (refs.json).
    #[arg(long)]
    refs: PathBuf,
    /// Text embedding header (text.json).
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_sequences: Option<usize>,
    #[arg(long)]
    train_len: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// Video embedding header.
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    text: PathBuf,
    /// Directory written by train-fewshot.
    #[arg(long)]
    classifier: PathBuf,
    /// Directory written by train-diffusion.
    #[arg(long)]
    diffusion: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_tta: bool,
    #[arg(long)]
    no_diffusion: bool,
    /// Force the refinement step instead of estimating it from entropy.
    #[arg(long)]
    noise_step: Option<usize>,
    /// Also write the three prediction streams.
    #[arg(long)]
    debug: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction JSON written by infer.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Name stored with the metrics; defaults to the prediction file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics files written by eval.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    /// Config snapshot embedded in the report.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a text table instead of JSON.
    #[arg(long)]
    table: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_bench(a: SynthBenchArgs) -> Result<()> {
    let graph = load_graph(&a.graph)?;
    if graph.k() != a.k {
        return Err(SpaError::DimensionMismatch(format!("graph has {} phases, --k is {}", graph.k(), a.k)).into());
    }
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        k: a.k,
        d: a.d,
        videos: a.videos,
        shots: a.shots,
        drift: a.drift,
        seed: a.seed,
        min_separation: a.min_separation.unwrap_or(d.min_separation),
        modality_gap: a.modality_gap.unwrap_or(d.modality_gap),
        fewshot_noise: a.fewshot_noise.unwrap_or(d.fewshot_noise),
        video_noise: a.noise.unwrap_or(d.video_noise),
        max_len: a.max_len.unwrap_or(d.max_len),
    };
    let bench = make_bench(&graph, &cfg)?;
    let videos = write_bench(&bench, &graph, &cfg, &a.out)?;
    println!("{}", json!({ "out": a.out, "videos": videos.len(), "references": bench.refs.len() }));
    Ok(())
}

fn graph_validate(graph: &Path, sequence: Option<&Path>, allow_truncated_tail: bool) -> Result<ExitCode> {
    let g = load_graph(graph)?;
    let Some(seq_path) = sequence else {
        println!("{}", json!({ "valid": true, "phases": g.k(), "edges": g.edges().count() }));
        return Ok(ExitCode::SUCCESS);
    };
    let text = fs::read_to_string(seq_path).with_context(|| format!("reading {}", seq_path.display()))?;
    // out-of-range labels are reported as violations, not load errors
    let labels = parse_labels(&text, usize::MAX)?;
    let check = g.validate_sequence(&PhaseSequence::from_labels(labels), allow_truncated_tail);
    let violations: Vec<String> = check.violations.iter().map(ToString::to_string).collect();
    println!("{}", serde_json::to_string_pretty(&json!({ "valid": check.is_valid(), "violations": violations }))?);
    Ok(if check.is_valid() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train_fewshot(a: TrainFewshotArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.fewshot_lr = a.lr.unwrap_or(cfg.fewshot_lr);
    cfg.fewshot_steps = a.steps.unwrap_or(cfg.fewshot_steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let refs = load_reference_set(&a.refs, cfg.normalize_embeddings)?;
    let text = maybe_normalize(load_embedding_pair(&a.text)?, cfg.normalize_embeddings)?;
    let (clf, loss) = train_classifier(&refs, &text, &cfg)?;
    clf.save(&a.out)?;
    let report = json!({
        "loss": loss,
        "train_accuracy": clf.accuracy(refs.embeddings(), &refs.labels())?,
        "config": cfg.to_value(),
    });
    write_json(&a.out.join("train_report.json"), &report)?;
    println!("{}", json!({ "steps": loss.len(), "final_loss": loss.last() }));
    Ok(())
}

fn train_diffusion(a: TrainDiffusionArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.diffusion_epochs = a.epochs.unwrap_or(cfg.diffusion_epochs);
    cfg.diffusion_batch = a.batch.unwrap_or(cfg.diffusion_batch);
    cfg.diffusion_lr = a.lr.unwrap_or(cfg.diffusion_lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.num_sequences = a.num_sequences.unwrap_or(cfg.num_sequences);
    cfg.train_len = a.train_len.unwrap_or(cfg.train_len);
    let graph = load_graph(&a.graph)?;
    let (model, report) = train_diffusion_from_graph(&graph, &cfg)?;
    model.save(&a.out)?;
    write_json(&a.out.join("train_report.json"), &json!({ "report": report, "config": cfg.to_value() }))?;
    println!("{}", json!({ "eval_loss": report.eval_loss.last(), "epochs": cfg.diffusion_epochs }));
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.no_tta {
        cfg.use_tta = false;
    }
    if a.no_diffusion {
        cfg.use_diffusion = false;
    }
    if a.noise_step.is_some() {
        cfg.noise_step = a.noise_step;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let refs = load_reference_set(&a.refs, cfg.normalize_embeddings)?;
    let text = maybe_normalize(load_embedding_pair(&a.text)?, cfg.normalize_embeddings)?;
    let video = maybe_normalize(load_embedding_pair(&a.video)?, cfg.normalize_embeddings)?;
    let classifier = FewShotClassifier::load(&a.classifier)?;
    let diffusion = match (&a.diffusion, cfg.use_diffusion) {
        (Some(dir), true) => Some(DiffusionModel::load(dir)?),
        (None, true) => bail!(SpaError::Config("--diffusion is required unless --no-diffusion is given".into())),
        (_, false) => None,
    };
    let ctx = InferenceContext { refs: &refs, text: &text, classifier: &classifier, diffusion: diffusion.as_ref() };
    let pred = run_infer(&video, &ctx, &cfg, a.debug)?;
    write_json(&a.out, &json!({ "prediction": pred, "config": cfg.to_value() }))?;
    println!("{}", json!({ "frames": pred.frames, "t_star": pred.t_star, "segments": pred.labels.run_count() }));
    Ok(())
}

fn load_prediction(path: &Path) -> Result<Prediction> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let inner = value.get("prediction").cloned().unwrap_or(value);
    Ok(serde_json::from_value(inner)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_prediction(&a.pred)?;
    let gt = load_labels(&a.labels, pred.k)?;
    let metrics = evaluate(&pred.labels, &gt, pred.k)?;
    let name = a.name.unwrap_or_else(|| {
        let stem = a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        stem.trim_end_matches(".pred").to_string()
    });
    let named = NamedMetrics { name, metrics };
    match &a.out {
        Some(out) => write_json(out, &named)?,
        None => println!("{}", serde_json::to_string_pretty(&named)?),
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let per_video = a
        .metrics
        .iter()
        .map(|p| -> Result<NamedMetrics> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let config = match &a.config {
        Some(p) => load_config(Some(p))?.to_value(),
        None => serde_json::Value::Null,
    };
    let r = report(&per_video, config);
    if let Some(out) = &a.out {
        write_json(out, &r)?;
    }
    if a.table {
        print!("{}", r.text_table());
    } else if a.out.is_none() {
        println!("{}", serde_json::to_string_pretty(&r)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthBench(a) => synth_bench(a)?,
        Command::Graph { command: GraphCommand::Validate { graph, sequence, allow_truncated_tail } } => {
            return graph_validate(&graph, sequence.as_deref(), allow_truncated_tail)
        }
        Command::TrainFewshot(a) => train_fewshot(a)?,
        Command::TrainDiffusion(a) => train_diffusion(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Report(a) => report_cmd(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SpaError>() {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! End-to-end flows: training the classifier and the sequence prior,
//! per-video inference, and synthetic benchmark I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    decode_phases, estimate_noise_step, DenoiserConfig, DiffusionModel, DiffusionTrainConfig, DiffusionTrainReport,
    RefineOptions, ScheduleKind, ScheduleSpec,
};
use crate::embedding::{
    load_embedding_pair, load_reference_set, maybe_normalize, save_embedding_pair, save_labels, save_reference_set,
    write_file, EmbeddingMatrix, LabelSequence, ReferenceSet,
};
use crate::error::{Result, SpaError};
use crate::fewshot::{FewShotClassifier, TrainConfig};
use crate::probs::ProbMatrix;
use crate::synth::{make_synthetic_world, SyntheticWorld, VideoConfig, WorldConfig};
use crate::task_graph::{TaskGraph, TransitionModel};
use crate::tta::{compute_streams, fuse_streams, tta_adapt, AdapterPair, StreamBundle, TtaConfig};

/// Every tunable of the pipeline as one flat key set. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub normalize_embeddings: bool,

    pub fewshot_lr: f64,
    pub fewshot_steps: usize,
    pub fewshot_early_stop_window: usize,
    pub fewshot_early_stop_tol: f64,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub denoiser_kernel: usize,
    pub denoiser_time_dim: usize,
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    pub train_len: usize,
    pub num_sequences: usize,
    pub sequence_max_len: usize,
    pub transition_model: TransitionModel,
    pub diffusion_eval_samples: usize,

    pub tta_epochs: usize,
    pub tta_lr: f64,
    pub tta_momentum: f64,
    pub tau: f64,
    pub tau_ref: f64,
    pub fusion_weights: [f64; 3],

    /// Upper clamp of the estimated noise step; `None` means `T / 2`.
    pub noise_step_cap: Option<usize>,
    /// Forces the refinement step instead of estimating it.
    pub noise_step: Option<usize>,
    pub decode_temperature: f64,
    pub renoise: bool,
    pub clip_denoised: bool,

    pub use_tta: bool,
    pub use_diffusion: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fewshot = TrainConfig::default();
        let schedule = ScheduleSpec::default();
        let denoiser = DenoiserConfig::new(1);
        let diffusion = DiffusionTrainConfig::default();
        let tta = TtaConfig::default();
        let refine = RefineOptions::default();
        Self {
            seed: 0,
            normalize_embeddings: true,
            fewshot_lr: fewshot.lr,
            fewshot_steps: fewshot.steps,
            fewshot_early_stop_window: fewshot.early_stop_window,
            fewshot_early_stop_tol: fewshot.early_stop_tol,
            diffusion_steps: schedule.steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            schedule: schedule.kind,
            denoiser_width: denoiser.width,
            denoiser_blocks: denoiser.blocks,
            denoiser_kernel: denoiser.kernel,
            denoiser_time_dim: denoiser.time_dim,
            diffusion_epochs: diffusion.epochs,
            diffusion_batch: diffusion.batch,
            diffusion_lr: diffusion.lr,
            train_len: diffusion.train_len,
            num_sequences: 10_000,
            sequence_max_len: 20_000,
            transition_model: TransitionModel::Segment,
            diffusion_eval_samples: diffusion.eval_samples,
            tta_epochs: tta.epochs,
            tta_lr: tta.lr,
            tta_momentum: tta.momentum,
            tau: tta.tau,
            tau_ref: tta.tau_ref,
            fusion_weights: [1.0 / 3.0; 3],
            noise_step_cap: None,
            noise_step: None,
            decode_temperature: refine.decode_temperature,
            renoise: refine.renoise,
            clip_denoised: refine.clip_denoised,
            use_tta: true,
            use_diffusion: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SpaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SpaError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn fewshot(&self) -> TrainConfig {
        TrainConfig {
            lr: self.fewshot_lr,
            steps: self.fewshot_steps,
            early_stop_window: self.fewshot_early_stop_window,
            early_stop_tol: self.fewshot_early_stop_tol,
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec { steps: self.diffusion_steps, beta_start: self.beta_start, beta_end: self.beta_end, kind: self.schedule }
    }

    pub fn denoiser(&self, k: usize) -> DenoiserConfig {
        DenoiserConfig {
            k,
            width: self.denoiser_width,
            blocks: self.denoiser_blocks,
            kernel: self.denoiser_kernel,
            time_dim: self.denoiser_time_dim,
        }
    }

    pub fn diffusion_training(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            epochs: self.diffusion_epochs,
            batch: self.diffusion_batch,
            lr: self.diffusion_lr,
            train_len: self.train_len,
            seed: self.seed,
            eval_samples: self.diffusion_eval_samples,
        }
    }

    pub fn tta(&self) -> TtaConfig {
        TtaConfig { epochs: self.tta_epochs, lr: self.tta_lr, tau: self.tau, tau_ref: self.tau_ref, momentum: self.tta_momentum }
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            decode_temperature: self.decode_temperature,
            renoise: self.renoise,
            stochastic: false,
            clip_denoised: self.clip_denoised,
            seed: self.seed,
        }
    }

    pub fn noise_cap(&self) -> usize {
        self.noise_step_cap.unwrap_or(self.diffusion_steps / 2)
    }
}

/// Trains the few-shot classifier on the labelled references.
pub fn train_classifier(
    refs: &ReferenceSet,
    text: &EmbeddingMatrix,
    cfg: &RunConfig,
) -> Result<(FewShotClassifier, Vec<f64>)> {
    let clf = FewShotClassifier::init(text, cfg.seed)?;
    clf.train(refs.embeddings(), &refs.labels(), &cfg.fewshot())
}

/// Samples `num_sequences` sequences from the graph and fits the diffusion prior.
pub fn train_diffusion_from_graph(graph: &TaskGraph, cfg: &RunConfig) -> Result<(DiffusionModel, DiffusionTrainReport)> {
    let seqs = graph.synthesize_dataset(cfg.num_sequences, cfg.seed, cfg.sequence_max_len, cfg.transition_model)?;
    let mut model = DiffusionModel::new(graph.k(), cfg.schedule_spec(), cfg.denoiser(graph.k()), cfg.seed)?;
    let report = model.train(&seqs, &cfg.diffusion_training())?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub fewshot_loss: Vec<f64>,
    pub fewshot_train_accuracy: f64,
    pub diffusion: Option<DiffusionTrainReport>,
    pub config: serde_json::Value,
}

pub struct AdaptInputs<'a> {
    pub refs: &'a Path,
    pub text: &'a Path,
    pub graph: Option<&'a Path>,
}

/// Trains both components from files and writes `classifier/`, `diffusion/`
/// and `train_report.json` under `out`.
pub fn run_adapt(inputs: &AdaptInputs<'_>, cfg: &RunConfig, out: &Path) -> Result<AdaptReport> {
    let refs = load_reference_set(inputs.refs, cfg.normalize_embeddings)?;
    let text = maybe_normalize(load_embedding_pair(inputs.text)?, cfg.normalize_embeddings)?;
    let (clf, fewshot_loss) = train_classifier(&refs, &text, cfg)?;
    clf.save(&out.join("classifier"))?;
    let fewshot_train_accuracy = clf.accuracy(refs.embeddings(), &refs.labels())?;
    let diffusion = match inputs.graph {
        Some(path) => {
            let graph = load_graph(path)?;
            let (model, report) = train_diffusion_from_graph(&graph, cfg)?;
            model.save(&out.join("diffusion"))?;
            Some(report)
        }
        None => None,
    };
    let report = AdaptReport { fewshot_loss, fewshot_train_accuracy, diffusion, config: cfg.to_value() };
    write_file(&out.join("train_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

pub fn load_graph(path: &Path) -> Result<TaskGraph> {
    let text = fs::read_to_string(path).map_err(|e| SpaError::io(path, e))?;
    TaskGraph::parse(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDump {
    pub s_ref: ProbMatrix,
    pub s_vl: ProbMatrix,
    pub s_fs: ProbMatrix,
}

impl From<&StreamBundle> for StreamDump {
    fn from(s: &StreamBundle) -> Self {
        Self { s_ref: s.s_ref.clone(), s_vl: s.s_vl.clone(), s_fs: s.s_fs.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frames: usize,
    pub k: usize,
    pub fused: ProbMatrix,
    pub refined: Option<ProbMatrix>,
    pub labels: LabelSequence,
    pub loss_trace: Vec<f64>,
    pub t_star: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streams: Option<StreamDump>,
}

impl Prediction {
    /// The final per-frame probabilities: refined when available, else fused.
    pub fn output(&self) -> &ProbMatrix {
        self.refined.as_ref().unwrap_or(&self.fused)
    }
}

/// Everything one video's inference reads; all shared read-only.
pub struct InferenceContext<'a> {
    pub refs: &'a ReferenceSet,
    pub text: &'a EmbeddingMatrix,
    pub classifier: &'a FewShotClassifier,
    pub diffusion: Option<&'a DiffusionModel>,
}

/// Adapt, compute streams, fuse, estimate the noise step, refine, decode.
/// Disabled stages pass their input through unchanged.
pub fn run_infer(video: &EmbeddingMatrix, ctx: &InferenceContext<'_>, cfg: &RunConfig, debug: bool) -> Result<Prediction> {
    let (adapters, loss_trace) = if cfg.use_tta {
        let outcome = tta_adapt(video, ctx.refs, ctx.text, ctx.classifier, &cfg.tta())?;
        (outcome.adapters, outcome.loss_trace)
    } else {
        (AdapterPair::identity(video.cols(), cfg.tau, cfg.tau_ref)?, Vec::new())
    };
    let streams = compute_streams(video, ctx.refs, ctx.text, ctx.classifier, &adapters)?;
    let fused = fuse_streams(&streams, cfg.fusion_weights)?;
    let (refined, t_star) = if cfg.use_diffusion {
        let model = ctx
            .diffusion
            .ok_or_else(|| SpaError::Config("diffusion refinement enabled but no model given".into()))?;
        let t_star = cfg.noise_step.unwrap_or_else(|| estimate_noise_step(&fused, model.schedule(), cfg.noise_cap()));
        (Some(model.refine(&fused, t_star, &cfg.refine_options())?), Some(t_star))
    } else {
        (None, None)
    };
    let labels = decode_phases(refined.as_ref().unwrap_or(&fused)).labels().clone();
    Ok(Prediction {
        frames: video.rows(),
        k: fused.k(),
        fused,
        refined,
        labels,
        loss_trace,
        t_star,
        streams: debug.then(|| StreamDump::from(&streams)),
    })
}

/// Knobs of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub k: usize,
    pub d: usize,
    pub videos: usize,
    pub shots: usize,
    pub drift: f64,
    pub seed: u64,
    pub min_separation: f64,
    pub modality_gap: f64,
    pub fewshot_noise: f64,
    pub video_noise: f64,
    pub max_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k: 7,
            d: 64,
            videos: 10,
            shots: 16,
            drift: 0.4,
            seed: 0,
            min_separation: 0.3,
            modality_gap: 0.6,
            fewshot_noise: 0.1,
            video_noise: 0.15,
            max_len: 4096,
        }
    }
}

pub struct Bench {
    pub world: SyntheticWorld,
    pub refs: ReferenceSet,
    pub text: EmbeddingMatrix,
    pub videos: Vec<(EmbeddingMatrix, LabelSequence)>,
}

/// Builds a benchmark: world from `seed`, references and videos from derived seeds.
pub fn make_bench(graph: &TaskGraph, cfg: &BenchConfig) -> Result<Bench> {
    let world = make_synthetic_world(&WorldConfig {
        k: cfg.k,
        d: cfg.d,
        seed: cfg.seed,
        min_separation: cfg.min_separation,
        modality_gap: cfg.modality_gap,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (refs, _) = world.make_fewshot_split(cfg.shots, cfg.fewshot_noise, &mut rng)?;
    let video_cfg = VideoConfig { max_len: cfg.max_len, noise_sigma: cfg.video_noise, drift: cfg.drift };
    let videos = (0..cfg.videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + i as u64));
            world.sample_video(graph, &video_cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bench { text: world.text_embeddings(), world, refs, videos })
}

pub fn video_name(i: usize) -> String {
    format!("video_{i:03}")
}

/// Layout: `text.{json,bin}`, `refs.json` + `refs/`, `videos/video_NNN.{json,bin,labels.txt}`,
/// `graph.json`, `bench.json`.
pub fn write_bench(bench: &Bench, graph: &TaskGraph, cfg: &BenchConfig, out: &Path) -> Result<Vec<PathBuf>> {
    save_embedding_pair(bench.text.as_array(), &out.join("text.json"))?;
    save_reference_set(&bench.refs, &out.join("refs.json"), "refs")?;
    write_file(&out.join("graph.json"), graph.to_json()?.as_bytes())?;
    write_file(&out.join("bench.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let mut written = Vec::new();
    for (i, (v, labels)) in bench.videos.iter().enumerate() {
        let header = out.join("videos").join(format!("{}.json", video_name(i)));
        save_embedding_pair(v.as_array(), &header)?;
        save_labels(labels, &out.join("videos").join(format!("{}.labels.txt", video_name(i))))?;
        written.push(header);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fewshot_lr, 0.01);
        assert_eq!((cfg.diffusion_epochs, cfg.diffusion_batch, cfg.diffusion_lr), (20, 128, 1e-4));
        assert_eq!((cfg.tta_epochs, cfg.tta_lr), (15, 1e-4));
        assert_eq!(cfg.noise_cap(), 50);
        let cfg = RunConfig::from_json(r#"{"tta_epochs": 3}"#).unwrap();
        assert_eq!(cfg.tta_epochs, 3);
        assert!(matches!(RunConfig::from_json(r#"{"tta_epoch": 3}"#), Err(SpaError::Config(_))));
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig { noise_step: Some(7), ..RunConfig::default() };
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

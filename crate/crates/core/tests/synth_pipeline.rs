mod common;

use common::branching_graph;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spa_core::diffusion::{DenoiserConfig, DiffusionModel, ScheduleSpec};
use spa_core::embedding::{load_embedding_pair, load_labels, load_reference_set, EmbeddingMatrix, LabelSequence};
use spa_core::fewshot::{FewShotClassifier, TrainConfig};
use spa_core::metrics::{evaluate, report, NamedMetrics};
use spa_core::pipeline::{make_bench, run_infer, train_classifier, write_bench, BenchConfig, InferenceContext, RunConfig};
use spa_core::synth::{make_synthetic_world, SyntheticWorld, VideoConfig, WorldConfig};
use spa_core::tta::{compute_streams, fuse_streams, tta_adapt, AdapterPair, TtaConfig};

fn world(seed: u64) -> SyntheticWorld {
    make_synthetic_world(&WorldConfig { k: 7, d: 64, seed, min_separation: 0.3, modality_gap: 0.6 }).unwrap()
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Nearest-prototype accuracy recomputed independently of the library.
fn nn_accuracy(w: &SyntheticWorld, v: &EmbeddingMatrix, labels: &LabelSequence) -> f64 {
    let mut hits = 0;
    for (row, &l) in v.as_array().axis_iter(Axis(0)).zip(labels.as_slice()) {
        let sims: Vec<f64> = w.vision_prototypes.axis_iter(Axis(0)).map(|p| p.dot(&row)).collect();
        hits += usize::from(argmax_row(ndarray::ArrayView1::from(&sims)) == l);
    }
    hits as f64 / labels.len() as f64
}

#[test]
fn prototypes_are_packed_below_the_ceiling() {
    let w = world(0);
    for i in 0..7 {
        assert!((w.vision_prototypes.row(i).dot(&w.vision_prototypes.row(i)) - 1.0).abs() < 1e-12);
        assert!((w.text_prototypes.row(i).dot(&w.text_prototypes.row(i)) - 1.0).abs() < 1e-12);
        for j in 0..7 {
            if i != j {
                assert!(w.vision_prototypes.row(i).dot(&w.vision_prototypes.row(j)) <= 0.3);
            }
        }
    }
}

#[test]
fn low_noise_video_is_perfectly_separable() {
    let w = world(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = VideoConfig { max_len: 4096, noise_sigma: 0.05, drift: 0.0 };
    let (v, labels) = w.sample_video(&branching_graph(), &cfg, &mut rng).unwrap();
    assert!(v.max_norm_deviation() < 1e-9);
    assert!(branching_graph()
        .validate_sequence(&spa_core::task_graph::PhaseSequence::from_labels(labels.clone()), true)
        .is_valid());
    assert_eq!(nn_accuracy(&w, &v, &labels), 1.0);
    assert_eq!(w.nearest_prototype_accuracy(&v, &labels), 1.0);
}

#[test]
fn sixteen_shot_classifier_generalises_to_iid_video() {
    let w = world(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (refs, labels) = w.make_fewshot_split(16, 0.1, &mut rng).unwrap();
    assert_eq!(refs.assoc().sum_axis(Axis(0)).to_vec(), vec![16.0; 7]);
    let clf = FewShotClassifier::init(&w.text_embeddings(), 0).unwrap();
    let (clf, _) = clf.train(refs.embeddings(), &labels, &TrainConfig::default()).unwrap();
    let cfg = VideoConfig { max_len: 4096, noise_sigma: 0.1, drift: 0.0 };
    let (v, gt) = w.sample_video(&branching_graph(), &cfg, &mut rng).unwrap();
    let pred = clf.predict_proba(&v).unwrap().argmax();
    let acc = pred.iter().zip(gt.as_slice()).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn drift_lowers_zero_shot_accuracy_on_average() {
    let graph = branching_graph();
    let drifts = [0.0, 0.1, 0.2, 0.4, 0.8];
    let mut means = vec![0.0; drifts.len()];
    for seed in 0..20 {
        let w = world(seed);
        for (i, &drift) in drifts.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let cfg = VideoConfig { max_len: 4096, noise_sigma: 0.15, drift };
            let (v, labels) = w.sample_video(&graph, &cfg, &mut rng).unwrap();
            means[i] += nn_accuracy(&w, &v, &labels) / 20.0;
        }
    }
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "{means:?}");
    }
}

fn small_bench(seed: u64) -> spa_core::pipeline::Bench {
    make_bench(&branching_graph(), &BenchConfig { videos: 3, seed, ..BenchConfig::default() }).unwrap()
}

fn untrained_diffusion() -> DiffusionModel {
    DiffusionModel::new(7, ScheduleSpec::default(), DenoiserConfig::new(7), 0).unwrap()
}

#[test]
fn stages_never_change_upstream_outputs() {
    let bench = small_bench(0);
    let cfg = RunConfig { tta_epochs: 3, tta_lr: 1e-2, ..RunConfig::default() };
    let (clf, _) = train_classifier(&bench.refs, &bench.text, &cfg).unwrap();
    let model = untrained_diffusion();
    let ctx = InferenceContext { refs: &bench.refs, text: &bench.text, classifier: &clf, diffusion: Some(&model) };
    let (v, _) = &bench.videos[0];

    let plain = run_infer(v, &ctx, &RunConfig { use_tta: false, use_diffusion: false, ..cfg.clone() }, true).unwrap();
    let tta = run_infer(v, &ctx, &RunConfig { use_diffusion: false, ..cfg.clone() }, true).unwrap();
    let full = run_infer(v, &ctx, &cfg, true).unwrap();

    // bypassing TTA is bit-identical to identity adapters
    let identity = AdapterPair::identity(64, cfg.tau, cfg.tau_ref).unwrap();
    let streams = compute_streams(v, &bench.refs, &bench.text, &clf, &identity).unwrap();
    assert_eq!(plain.fused, fuse_streams(&streams, cfg.fusion_weights).unwrap());
    assert_eq!(plain.labels.0, plain.fused.argmax());
    assert!(plain.refined.is_none() && plain.t_star.is_none() && plain.loss_trace.is_empty());

    // zero TTA epochs leave the streams untouched
    let zero = run_infer(v, &ctx, &RunConfig { tta_epochs: 0, use_diffusion: false, ..cfg.clone() }, false).unwrap();
    assert_eq!(zero.fused, plain.fused);

    // diffusion only acts downstream of fusion
    assert_eq!(full.fused, tta.fused);
    assert_eq!(full.streams, tta.streams);
    assert_eq!(full.loss_trace, tta.loss_trace);
    assert!(full.refined.is_some());

    // the few-shot stream is independent of adaptation
    assert_eq!(plain.streams.as_ref().unwrap().s_fs, tta.streams.as_ref().unwrap().s_fs);
}

#[test]
fn zero_step_training_is_the_text_classifier() {
    let bench = small_bench(1);
    let cfg = RunConfig { fewshot_steps: 0, ..RunConfig::default() };
    let (clf, trace) = train_classifier(&bench.refs, &bench.text, &cfg).unwrap();
    assert!(trace.is_empty());
    assert!(clf.prototypes().iter().all(|&w| w == 0.0));
    assert!(clf.multipliers().iter().all(|&a| a == 1.0));
    let (v, _) = &bench.videos[0];
    let logits = v.as_array().dot(&bench.text.as_array().t());
    assert_eq!(clf.logits(v).unwrap(), logits);
}

#[test]
fn adaptation_lowers_the_objective_on_a_drifted_video() {
    let bench = small_bench(0);
    let (clf, _) = train_classifier(&bench.refs, &bench.text, &RunConfig::default()).unwrap();
    let (v, _) = &bench.videos[0];
    let out = tta_adapt(v, &bench.refs, &bench.text, &clf, &TtaConfig::default()).unwrap();
    assert_eq!(out.loss_trace.len(), 15);
    assert!(out.loss_trace.last().unwrap() <= &out.loss_trace[0]);
    let zero = tta_adapt(v, &bench.refs, &bench.text, &clf, &TtaConfig { epochs: 0, ..TtaConfig::default() }).unwrap();
    assert!(zero.adapters.is_identity());
}

#[test]
fn inference_is_deterministic() {
    let bench = small_bench(2);
    let cfg = RunConfig::default();
    let (clf, _) = train_classifier(&bench.refs, &bench.text, &cfg).unwrap();
    let model = untrained_diffusion();
    let ctx = InferenceContext { refs: &bench.refs, text: &bench.text, classifier: &clf, diffusion: Some(&model) };
    let a = run_infer(&bench.videos[1].0, &ctx, &cfg, true).unwrap();
    let b = run_infer(&bench.videos[1].0, &ctx, &cfg, true).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn report_totals_match_recomputed_means() {
    let bench = make_bench(&branching_graph(), &BenchConfig::default()).unwrap();
    let cfg = RunConfig { use_diffusion: false, ..RunConfig::default() };
    let (clf, _) = train_classifier(&bench.refs, &bench.text, &cfg).unwrap();
    let ctx = InferenceContext { refs: &bench.refs, text: &bench.text, classifier: &clf, diffusion: None };
    let per_video: Vec<NamedMetrics> = bench
        .videos
        .iter()
        .enumerate()
        .map(|(i, (v, gt))| NamedMetrics {
            name: format!("video_{i:03}"),
            metrics: evaluate(&run_infer(v, &ctx, &cfg, false).unwrap().labels, gt, 7).unwrap(),
        })
        .collect();
    let r = report(&per_video, cfg.to_value());
    assert_eq!(r.videos, 10);
    let f1: Vec<f64> = per_video.iter().map(|m| m.metrics.macro_f1).collect();
    let mean = f1.iter().sum::<f64>() / 10.0;
    let std = (f1.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 10.0).sqrt();
    assert!((r.macro_f1.mean - mean).abs() < 1e-12);
    assert!((r.macro_f1.std - std).abs() < 1e-12);
    let segs = per_video.iter().map(|m| m.metrics.segment_count as f64).sum::<f64>() / 10.0;
    assert!((r.segment_count.mean - segs).abs() < 1e-12);
    assert_eq!(r.config, cfg.to_value());
}

#[test]
fn written_bench_loads_back() {
    let graph = branching_graph();
    let cfg = BenchConfig { videos: 2, ..BenchConfig::default() };
    let bench = make_bench(&graph, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bench(&bench, &graph, &cfg, dir.path()).unwrap();

    let refs = load_reference_set(&dir.path().join("refs.json"), false).unwrap();
    assert_eq!(refs.shots_per_phase(), vec![16; 7]);
    let text = load_embedding_pair(&dir.path().join("text.json")).unwrap();
    assert_eq!(text.as_array().dim(), (7, 64));
    for i in 0..2 {
        let v = load_embedding_pair(&dir.path().join(format!("videos/video_{i:03}.json"))).unwrap();
        let l = load_labels(&dir.path().join(format!("videos/video_{i:03}.labels.txt")), 7).unwrap();
        assert_eq!(l, bench.videos[i].1);
        assert_eq!(v.rows(), l.len());
        for (a, b) in v.as_array().iter().zip(bench.videos[i].0.as_array().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let g = spa_core::pipeline::load_graph(&dir.path().join("graph.json")).unwrap();
    assert_eq!(g.k(), 7);
    assert_eq!(g.edges().count(), graph.edges().count());
}

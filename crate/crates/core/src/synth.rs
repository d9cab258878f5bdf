//! Synthetic stand-ins for frozen encoder outputs: well-separated phase
//! prototypes, text prototypes offset by a modality gap, and videos whose
//! frames scatter around their phase prototype under a per-video drift.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, LabelSequence, ReferenceSet};
use crate::error::{Result, SpaError};
use crate::task_graph::{TaskGraph, TransitionModel};

const PACKING_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub k: usize,
    pub d: usize,
    pub vision_prototypes: Array2<f64>,
    pub text_prototypes: Array2<f64>,
    pub modality_gap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    /// Upper bound on the cosine between any two vision prototypes.
    pub min_separation: f64,
    /// Angle (radians) between each vision prototype and its text prototype.
    pub modality_gap: f64,
}

fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample(StandardNormal))
}

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = gaussian_vector(d, rng);
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn make_synthetic_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    if cfg.k == 0 || cfg.d == 0 {
        return Err(SpaError::DimensionMismatch("world needs k >= 1 and d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vision = Array2::zeros((cfg.k, cfg.d));
    for i in 0..cfg.k {
        let mut placed = false;
        for _ in 0..PACKING_ATTEMPTS {
            let cand = unit_vector(cfg.d, &mut rng);
            if (0..i).all(|j| vision.row(j).dot(&cand) <= cfg.min_separation) {
                vision.row_mut(i).assign(&cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SpaError::PackingFailure { k: cfg.k, bound: cfg.min_separation, attempts: PACKING_ATTEMPTS });
        }
    }
    let mut text = vision.clone();
    if cfg.modality_gap != 0.0 {
        if cfg.d < 2 {
            return Err(SpaError::DimensionMismatch("a modality gap needs d >= 2".into()));
        }
        for (mut t, p) in text.axis_iter_mut(Axis(0)).zip(vision.axis_iter(Axis(0))) {
            // random unit direction orthogonal to p spans the rotation plane
            let ortho = loop {
                let r = gaussian_vector(cfg.d, &mut rng);
                let r = &r - &(&p * p.dot(&r));
                let n = r.dot(&r).sqrt();
                if n > 1e-9 {
                    break r / n;
                }
            };
            let rotated = &p * cfg.modality_gap.cos() + &ortho * cfg.modality_gap.sin();
            t.assign(&normalize(rotated));
        }
    }
    Ok(SyntheticWorld {
        k: cfg.k,
        d: cfg.d,
        vision_prototypes: vision,
        text_prototypes: text,
        modality_gap: cfg.modality_gap,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub max_len: usize,
    /// Per-coordinate standard deviation of frame noise.
    pub noise_sigma: f64,
    /// Per-coordinate scale of the constant drift vector added to every frame.
    pub drift: f64,
}

impl SyntheticWorld {
    pub fn text_embeddings(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.text_prototypes.clone()).expect("prototypes are finite")
    }

    fn frame<R: Rng + ?Sized>(&self, label: usize, sigma: f64, drift: &Array1<f64>, rng: &mut R) -> Array1<f64> {
        let mut v = self.vision_prototypes.row(label).to_owned() + drift;
        if sigma > 0.0 {
            v.scaled_add(sigma, &gaussian_vector(self.d, rng));
        }
        normalize(v)
    }

    /// Draws a labelled video: phases from the task graph, frames as
    /// `normalize(prototype + sigma * noise + drift)`.
    pub fn sample_video<R: Rng + ?Sized>(
        &self,
        graph: &TaskGraph,
        cfg: &VideoConfig,
        rng: &mut R,
    ) -> Result<(EmbeddingMatrix, LabelSequence)> {
        if graph.k() != self.k {
            return Err(SpaError::DimensionMismatch(format!("graph has {} phases, world has {}", graph.k(), self.k)));
        }
        let seq = graph.synthesize_sequence(rng, cfg.max_len, TransitionModel::Segment)?;
        let drift = if cfg.drift > 0.0 { gaussian_vector(self.d, rng) * cfg.drift } else { Array1::zeros(self.d) };
        let labels = seq.labels().clone();
        let mut data = Array2::zeros((labels.len(), self.d));
        for (i, &l) in labels.as_slice().iter().enumerate() {
            data.row_mut(i).assign(&self.frame(l, cfg.noise_sigma, &drift, rng));
        }
        Ok((EmbeddingMatrix::new(data)?, labels))
    }

    /// `shots` undrifted samples per phase, grouped by phase.
    pub fn make_fewshot_split<R: Rng + ?Sized>(
        &self,
        shots: usize,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<(ReferenceSet, LabelSequence)> {
        if shots == 0 {
            return Err(SpaError::InvalidRange("shots must be at least 1".into()));
        }
        let zero = Array1::zeros(self.d);
        let mut data = Array2::zeros((self.k * shots, self.d));
        let mut labels = Vec::with_capacity(self.k * shots);
        for phase in 0..self.k {
            for s in 0..shots {
                data.row_mut(phase * shots + s).assign(&self.frame(phase, noise_sigma, &zero, rng));
                labels.push(phase);
            }
        }
        let labels = LabelSequence(labels);
        let refs = ReferenceSet::new(EmbeddingMatrix::new(data)?, &labels, self.k)?;
        Ok((refs, labels))
    }

    /// Fraction of frames whose most similar vision prototype is their own phase.
    pub fn nearest_prototype_accuracy(&self, v: &EmbeddingMatrix, labels: &LabelSequence) -> f64 {
        let sims = v.as_array().dot(&self.vision_prototypes.t());
        let hits = sims
            .axis_iter(Axis(0))
            .zip(labels.as_slice())
            .filter(|(row, &l)| {
                let mut best = 0;
                for (j, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = j;
                    }
                }
                best == l
            })
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(gap: f64) -> SyntheticWorld {
        make_synthetic_world(&WorldConfig { k: 7, d: 64, seed: 0, min_separation: 0.3, modality_gap: gap }).unwrap()
    }

    fn graph() -> TaskGraph {
        let phases: Vec<String> = (0..7)
            .map(|i| {
                format!(
                    r#"{{"id":{i},"name":"P{i}","min_duration":10,"max_duration":20,"start":{},"terminal":{}}}"#,
                    i == 0,
                    i == 6
                )
            })
            .collect();
        let edges: Vec<String> = (0..6).map(|i| format!("[{i},{}]", i + 1)).collect();
        TaskGraph::parse(&format!(r#"{{"phases":[{}],"edges":[{}]}}"#, phases.join(","), edges.join(","))).unwrap()
    }

    #[test]
    fn zero_gap_copies_prototypes() {
        let w = world(0.0);
        assert_eq!(w.vision_prototypes, w.text_prototypes);
    }

    #[test]
    fn worlds_are_seeded_and_separated() {
        let w = world(0.5);
        assert_eq!(w, world(0.5));
        for i in 0..7 {
            assert!((w.text_prototypes.row(i).dot(&w.vision_prototypes.row(i)) - 0.5f64.cos()).abs() < 1e-12);
            for j in 0..i {
                assert!(w.vision_prototypes.row(i).dot(&w.vision_prototypes.row(j)) <= 0.3);
            }
        }
    }

    #[test]
    fn impossible_packing_fails() {
        let cfg = WorldConfig { k: 5, d: 2, seed: 0, min_separation: -0.9, modality_gap: 0.0 };
        assert!(matches!(make_synthetic_world(&cfg), Err(SpaError::PackingFailure { .. })));
    }

    #[test]
    fn noiseless_frames_are_prototypes() {
        let w = world(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = VideoConfig { max_len: 200, noise_sigma: 0.0, drift: 0.0 };
        let (v, labels) = w.sample_video(&graph(), &cfg, &mut rng).unwrap();
        for (i, &l) in labels.as_slice().iter().enumerate() {
            let diff = &v.as_array().row(i) - &w.vision_prototypes.row(l);
            assert!(diff.iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn split_is_balanced() {
        let w = world(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (refs, labels) = w.make_fewshot_split(1, 0.1, &mut rng).unwrap();
        assert_eq!(refs.len(), 7);
        let (refs, _) = w.make_fewshot_split(16, 0.1, &mut rng).unwrap();
        assert_eq!(refs.shots_per_phase(), vec![16; 7]);
        assert_eq!(labels.0, (0..7).collect::<Vec<_>>());
        assert!(refs.embeddings().max_norm_deviation() < 1e-9);
    }
}

//! Gaussian diffusion over phase sequences in a signed hidden space.
//!
//! A label sequence of length `L` over `K` phases is encoded as an `L x K`
//! matrix with `+1` at the label and `-1` elsewhere. The forward process adds
//! Gaussian noise along a fixed schedule; a learned denoiser predicts the
//! clean matrix, and the reverse chain steps through the Gaussian posterior
//! mean. Coarse per-frame probabilities are refined by treating their
//! encoding as a noisy state at an estimated step and running the chain
//! back to zero.

mod denoiser;
mod schedule;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use denoiser::{step_embedding, Denoiser, DenoiserConfig, ForwardCache};
pub use schedule::{NoiseSchedule, ScheduleKind};

use crate::embedding::{load_embedding_pair, save_embedding_pair, write_file, LabelSequence};
use crate::error::{Result, SpaError};
use crate::probs::ProbMatrix;
use crate::task_graph::PhaseSequence;

/// An `L x K` sequence in the signed hidden space.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence(pub Array2<f64>);

impl HiddenSequence {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub fn encode_labels(labels: &LabelSequence, k: usize) -> Result<HiddenSequence> {
    let mut h = Array2::from_elem((labels.len(), k), -1.0);
    for (i, &l) in labels.as_slice().iter().enumerate() {
        if l >= k {
            return Err(SpaError::OutOfRangeLabel { position: i, value: l, k });
        }
        h[[i, l]] = 1.0;
    }
    Ok(HiddenSequence(h))
}

/// `2p - 1`, which agrees with [`encode_labels`] on one-hot rows.
pub fn encode_probs(p: &ProbMatrix) -> HiddenSequence {
    HiddenSequence(p.as_array().mapv(|v| 2.0 * v - 1.0))
}

/// Per-frame argmax, lowest phase index on ties.
pub fn decode_phases(p: &ProbMatrix) -> PhaseSequence {
    PhaseSequence::from_labels(LabelSequence(p.argmax()))
}

/// Samples `H_t = sqrt(alpha_bar_t) H_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<R: Rng + ?Sized>(
    h0: &HiddenSequence,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<HiddenSequence> {
    schedule.check_step(t, 1)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = h0.0.clone();
    for v in out.iter_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = signal * *v + noise * eps;
    }
    Ok(HiddenSequence(out))
}

/// Noise step matching the uncertainty of `p`: `round(T * H / ln K)`, where
/// `H` is the mean row entropy, clamped to `[0, cap]`.
pub fn estimate_noise_step(p: &ProbMatrix, schedule: &NoiseSchedule, cap: usize) -> usize {
    let k = p.k();
    if k < 2 || p.rows() == 0 {
        return 0;
    }
    let ratio = p.mean_entropy() / (k as f64).ln();
    let t = (schedule.steps() as f64 * ratio).round().max(0.0) as usize;
    t.min(cap).min(schedule.steps())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Temperature of the softmax mapping the final clean estimate to probabilities.
    pub decode_temperature: f64,
    /// Re-noise the coarse input to the marginal at `t*` before denoising.
    pub renoise: bool,
    /// Sample the reverse transitions instead of following their means.
    pub stochastic: bool,
    /// Clip clean estimates to the hidden range `[-1, 1]`.
    pub clip_denoised: bool,
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { decode_temperature: 0.5, renoise: false, stochastic: false, clip_denoised: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_len: usize,
    pub seed: u64,
    /// Size of the fixed held-out (crop, step, noise) set scored after every epoch.
    pub eval_samples: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch: 128, lr: 1e-4, train_len: 512, seed: 0, eval_samples: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    /// Loss on the fixed evaluation set before training and after each epoch.
    pub eval_loss: Vec<f64>,
    /// Mean minibatch loss of each epoch.
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    schedule: NoiseSchedule,
    schedule_spec: ScheduleSpec,
    denoiser: Denoiser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    k: usize,
    schedule: ScheduleSpec,
    denoiser: DenoiserConfig,
    num_params: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// A crop of `len` frames starting at `offset`, wrapping around cyclically.
fn cyclic_crop(labels: &[usize], offset: usize, len: usize) -> LabelSequence {
    LabelSequence((0..len).map(|i| labels[(offset + i) % labels.len()]).collect())
}

fn sample_crop<R: Rng + ?Sized>(labels: &[usize], len: usize, rng: &mut R) -> LabelSequence {
    let offset = if labels.len() > len { rng.random_range(0..=labels.len() - len) } else { 0 };
    cyclic_crop(labels, offset, len)
}

struct TrainingExample {
    clean: Array2<f64>,
    noisy: Array2<f64>,
    t: usize,
}

impl DiffusionModel {
    pub fn new(k: usize, schedule: ScheduleSpec, denoiser: DenoiserConfig, seed: u64) -> Result<Self> {
        if denoiser.k != k {
            return Err(SpaError::DimensionMismatch(format!("denoiser k={} for model k={k}", denoiser.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { schedule: schedule.build()?, schedule_spec: schedule, denoiser: Denoiser::new(denoiser, &mut rng)? })
    }

    pub fn k(&self) -> usize {
        self.denoiser.config().k
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn schedule_spec(&self) -> &ScheduleSpec {
        &self.schedule_spec
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn denoiser_mut(&mut self) -> &mut Denoiser {
        &mut self.denoiser
    }

    /// Estimate of the clean sequence `H_0` from `H_t`.
    pub fn denoise(&self, ht: &HiddenSequence, t: usize) -> Result<HiddenSequence> {
        Ok(HiddenSequence(self.denoiser.forward(&ht.0, t)?))
    }

    fn make_example<R: Rng + ?Sized>(&self, seq: &PhaseSequence, train_len: usize, rng: &mut R) -> Result<TrainingExample> {
        let crop = sample_crop(seq.labels().as_slice(), train_len, rng);
        let clean = encode_labels(&crop, self.k())?;
        let t = rng.random_range(1..=self.schedule.steps());
        let noisy = forward_noise(&clean, t, &self.schedule, rng)?;
        Ok(TrainingExample { clean: clean.0, noisy: noisy.0, t })
    }

    fn eval_loss(&self, set: &[TrainingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in set {
            let out = self.denoiser.forward(&ex.noisy, ex.t)?;
            total += (out - &ex.clean).mapv(|d| d * d).mean().unwrap_or(0.0);
        }
        Ok(total / set.len().max(1) as f64)
    }

    /// Trains the denoiser with Adam on the clean-sequence MSE, drawing one
    /// crop, step and noise sample per sequence visit.
    pub fn train(&mut self, seqs: &[PhaseSequence], cfg: &DiffusionTrainConfig) -> Result<DiffusionTrainReport> {
        let seqs: Vec<&PhaseSequence> = seqs.iter().filter(|s| !s.is_empty()).collect();
        if seqs.is_empty() {
            return Err(SpaError::EmptyDataset);
        }
        if cfg.batch == 0 || cfg.train_len == 0 {
            return Err(SpaError::Config("batch and train_len must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
        let eval_set = (0..cfg.eval_samples)
            .map(|i| self.make_example(seqs[i % seqs.len()], cfg.train_len, &mut eval_rng))
            .collect::<Result<Vec<_>>>()?;

        let mut report = DiffusionTrainReport { eval_loss: vec![self.eval_loss(&eval_set)?], train_loss: Vec::new() };
        let mut adam = Adam::new(self.denoiser.num_params());
        let mut grad = vec![0.0; self.denoiser.num_params()];
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let weight = 1.0 / chunk.len() as f64;
                let mut batch_loss = 0.0;
                for &idx in chunk {
                    let ex = self.make_example(seqs[idx], cfg.train_len, &mut rng)?;
                    batch_loss += weight
                        * self.denoiser.mse_loss_and_grad(&ex.noisy, ex.t, &ex.clean, weight, &mut grad)?;
                }
                if !batch_loss.is_finite() {
                    return Err(SpaError::NonFiniteLoss { step });
                }
                adam.update(self.denoiser.params_mut(), &grad, cfg.lr);
                epoch_loss += batch_loss;
                batches += 1;
                step += 1;
            }
            report.train_loss.push(epoch_loss / batches as f64);
            let eval = self.eval_loss(&eval_set)?;
            if !eval.is_finite() {
                return Err(SpaError::NonFiniteLoss { step });
            }
            report.eval_loss.push(eval);
        }
        Ok(report)
    }

    /// Runs the reverse chain from `t_star` starting at the encoding of `p`.
    /// `t_star = 0` returns `p` unchanged.
    pub fn refine(&self, p: &ProbMatrix, t_star: usize, opts: &RefineOptions) -> Result<ProbMatrix> {
        self.schedule.check_step(t_star, 0)?;
        if p.k() != self.k() {
            return Err(SpaError::DimensionMismatch(format!("{} phases for a model of {}", p.k(), self.k())));
        }
        if t_star == 0 || p.rows() == 0 {
            return Ok(p.clone());
        }
        if !(opts.decode_temperature > 0.0 && opts.decode_temperature.is_finite()) {
            return Err(SpaError::InvalidTemperature(opts.decode_temperature));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut h = encode_probs(p);
        if opts.renoise {
            h = forward_noise(&h, t_star, &self.schedule, &mut rng)?;
        }
        let mut state = h.0;
        let mut clean = Array2::zeros(state.dim());
        for t in (1..=t_star).rev() {
            clean = self.denoiser.forward(&state, t)?;
            if opts.clip_denoised {
                clean.mapv_inplace(|v| v.clamp(-1.0, 1.0));
            }
            let (c0, ct, var) = self.schedule.posterior(t);
            let mut next = &clean * c0 + &state * ct;
            if opts.stochastic && t > 1 && var > 0.0 {
                let sd = var.sqrt();
                next.mapv_inplace(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
            }
            state = next;
        }
        // At t = 1 the posterior mean is exactly the clean estimate.
        let logits = clean / opts.decode_temperature;
        Ok(ProbMatrix::softmax(&logits))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            k: self.k(),
            schedule: self.schedule_spec,
            denoiser: *self.denoiser.config(),
            num_params: self.denoiser.num_params(),
        };
        write_file(&dir.join("diffusion.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        let params = Array2::from_shape_vec((1, self.denoiser.num_params()), self.denoiser.params().to_vec())
            .map_err(|e| SpaError::DimensionMismatch(e.to_string()))?;
        save_embedding_pair(&params, &dir.join("params.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("diffusion.json");
        let text = fs::read_to_string(&path).map_err(|e| SpaError::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let params = load_embedding_pair(&dir.join("params.json"))?.into_inner();
        if params.len() != meta.num_params {
            return Err(SpaError::SizeMismatch { expected: meta.num_params, actual: params.len() });
        }
        let denoiser = Denoiser::from_params(meta.denoiser, params.into_iter().collect())?;
        if denoiser.config().k != meta.k {
            return Err(SpaError::DimensionMismatch("checkpoint k disagrees with denoiser".into()));
        }
        Ok(Self { schedule: meta.schedule.build()?, schedule_spec: meta.schedule, denoiser })
    }
}

/// Fraction of frames where `a` and `b` agree.
pub fn frame_accuracy(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

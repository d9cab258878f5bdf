//! Per-video test-time adaptation over three prediction streams.
//!
//! Two square adapters `f_v` (vision) and `f_t` (text) start at the identity.
//! With `V' = V f_vᵀ`, `R' = R f_vᵀ` and `T' = T f_tᵀ` the streams are
//!
//! ```text
//! S_ref = softmax(V' R'ᵀ / tau_ref) C
//! S_vl  = softmax(V' T'ᵀ / tau)
//! S_fs  = few-shot classifier on the raw embeddings (constant)
//! ```
//!
//! and the adapters follow full-batch gradient descent on
//! `M(S_ref, S_vl) + M(S_fs, S_ref)` with `M(A, B) = -(1/L) sum A log B`.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, ReferenceSet};
use crate::error::{Result, SpaError};
use crate::fewshot::{FewShotClassifier, PROB_FLOOR};
use crate::probs::{softmax_rows, softmax_rows_backward, ProbMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub vision: Array2<f64>,
    pub text: Array2<f64>,
    tau: f64,
    tau_ref: f64,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(SpaError::InvalidTemperature(tau))
    }
}

impl AdapterPair {
    pub fn identity(d: usize, tau: f64, tau_ref: f64) -> Result<Self> {
        if d == 0 {
            return Err(SpaError::DimensionMismatch("adapter dimension must be positive".into()));
        }
        check_temperature(tau)?;
        check_temperature(tau_ref)?;
        Ok(Self { vision: Array2::eye(d), text: Array2::eye(d), tau, tau_ref })
    }

    pub fn d(&self) -> usize {
        self.vision.nrows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tau_ref(&self) -> f64 {
        self.tau_ref
    }

    pub fn is_identity(&self) -> bool {
        let eye = Array2::<f64>::eye(self.d());
        self.vision == eye && self.text == eye
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub tau_ref: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    pub momentum: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { epochs: 15, lr: 1e-4, tau: 0.07, tau_ref: 0.07, momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBundle {
    pub s_ref: ProbMatrix,
    pub s_vl: ProbMatrix,
    pub s_fs: ProbMatrix,
}

fn check_cols(name: &str, m: &Array2<f64>, d: usize) -> Result<()> {
    if m.ncols() != d {
        return Err(SpaError::DimensionMismatch(format!("{name} has {} columns, adapters are {d}x{d}", m.ncols())));
    }
    Ok(())
}

/// `f(x)` applied row-wise: `X Fᵀ`.
fn adapt(x: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
    x.dot(&f.t())
}

struct RefForward {
    v_adapted: Array2<f64>,
    r_adapted: Array2<f64>,
    weights: Array2<f64>,
    probs: Array2<f64>,
}

fn reference_forward(v: &Array2<f64>, refs: &ReferenceSet, a: &AdapterPair) -> Result<RefForward> {
    check_cols("video embeddings", v, a.d())?;
    check_cols("reference embeddings", refs.embeddings().as_array(), a.d())?;
    let v_adapted = adapt(v, &a.vision);
    let r_adapted = adapt(refs.embeddings().as_array(), &a.vision);
    let weights = softmax_rows(&(v_adapted.dot(&r_adapted.t()) / a.tau_ref));
    let probs = weights.dot(refs.assoc());
    Ok(RefForward { v_adapted, r_adapted, weights, probs })
}

struct VlForward {
    t_adapted: Array2<f64>,
    probs: Array2<f64>,
}

fn vl_forward(v_adapted: &Array2<f64>, t: &Array2<f64>, a: &AdapterPair) -> Result<VlForward> {
    check_cols("text embeddings", t, a.d())?;
    let t_adapted = adapt(t, &a.text);
    let probs = softmax_rows(&(v_adapted.dot(&t_adapted.t()) / a.tau));
    Ok(VlForward { t_adapted, probs })
}

pub fn stream_reference(v: &EmbeddingMatrix, refs: &ReferenceSet, a: &AdapterPair) -> Result<ProbMatrix> {
    Ok(ProbMatrix::from_trusted(reference_forward(v.as_array(), refs, a)?.probs))
}

pub fn stream_vision_language(v: &EmbeddingMatrix, t: &EmbeddingMatrix, a: &AdapterPair) -> Result<ProbMatrix> {
    check_cols("video embeddings", v.as_array(), a.d())?;
    let v_adapted = adapt(v.as_array(), &a.vision);
    Ok(ProbMatrix::from_trusted(vl_forward(&v_adapted, t.as_array(), a)?.probs))
}

/// The few-shot classifier on raw embeddings; independent of the adapters.
pub fn stream_fewshot(clf: &FewShotClassifier, v: &EmbeddingMatrix) -> Result<ProbMatrix> {
    clf.predict_proba(v)
}

pub fn compute_streams(
    v: &EmbeddingMatrix,
    refs: &ReferenceSet,
    t: &EmbeddingMatrix,
    clf: &FewShotClassifier,
    a: &AdapterPair,
) -> Result<StreamBundle> {
    Ok(StreamBundle {
        s_ref: stream_reference(v, refs, a)?,
        s_vl: stream_vision_language(v, t, a)?,
        s_fs: stream_fewshot(clf, v)?,
    })
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SpaError::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mutual_value(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let rows = a.nrows().max(1) as f64;
    let mut total = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| total -= x * y.max(PROB_FLOOR).ln());
    total / rows
}

/// `-(1/L) sum_l sum_k A_lk log B_lk`, with `B` floored at `1e-12`.
pub fn mutual_loss(a: &ProbMatrix, b: &ProbMatrix) -> Result<f64> {
    check_same_shape(a.as_array(), b.as_array())?;
    Ok(mutual_value(a.as_array(), b.as_array()))
}

/// Gradients of `M(A, B)` with respect to both arguments.
fn mutual_grads(a: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let rows = a.nrows().max(1) as f64;
    let da = b.mapv(|y| -y.max(PROB_FLOOR).ln() / rows);
    let mut db = Array2::zeros(b.dim());
    Zip::from(&mut db).and(a).and(b).for_each(|g, &x, &y| {
        if y > PROB_FLOOR {
            *g = -x / (y * rows);
        }
    });
    (da, db)
}

/// Adaptation objective and its gradients with respect to both adapters.
pub struct ObjectiveEval {
    pub loss: f64,
    pub grad_vision: Array2<f64>,
    pub grad_text: Array2<f64>,
}

/// Evaluates `M(S_ref, S_vl) + M(S_fs, S_ref)` and its adapter gradients.
pub fn adaptation_objective(
    v: &EmbeddingMatrix,
    refs: &ReferenceSet,
    t: &EmbeddingMatrix,
    s_fs: &ProbMatrix,
    a: &AdapterPair,
) -> Result<ObjectiveEval> {
    let v = v.as_array();
    let rf = reference_forward(v, refs, a)?;
    let vl = vl_forward(&rf.v_adapted, t.as_array(), a)?;
    check_same_shape(&rf.probs, s_fs.as_array())?;

    let loss = mutual_value(&rf.probs, &vl.probs) + mutual_value(s_fs.as_array(), &rf.probs);

    let (mut d_ref, d_vl) = mutual_grads(&rf.probs, &vl.probs);
    let (_, d_ref_second) = mutual_grads(s_fs.as_array(), &rf.probs);
    d_ref += &d_ref_second;

    // S_vl = softmax(V' T'ᵀ / tau)
    let d_vl_logits = softmax_rows_backward(&vl.probs, &d_vl) / a.tau;
    let mut d_v_adapted = d_vl_logits.dot(&vl.t_adapted);
    let d_t_adapted = d_vl_logits.t().dot(&rf.v_adapted);

    // S_ref = softmax(V' R'ᵀ / tau_ref) C
    let d_weights = d_ref.dot(&refs.assoc().t());
    let d_ref_logits = softmax_rows_backward(&rf.weights, &d_weights) / a.tau_ref;
    d_v_adapted += &d_ref_logits.dot(&rf.r_adapted);
    let d_r_adapted = d_ref_logits.t().dot(&rf.v_adapted);

    // X' = X Fᵀ  =>  dF = dX'ᵀ X
    let grad_vision = d_v_adapted.t().dot(v) + d_r_adapted.t().dot(refs.embeddings().as_array());
    let grad_text = d_t_adapted.t().dot(t.as_array());
    Ok(ObjectiveEval { loss, grad_vision, grad_text })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaOutcome {
    pub adapters: AdapterPair,
    /// Objective value before each update.
    pub loss_trace: Vec<f64>,
}

/// Adapts a fresh identity adapter pair to one video.
pub fn tta_adapt(
    v: &EmbeddingMatrix,
    refs: &ReferenceSet,
    t: &EmbeddingMatrix,
    clf: &FewShotClassifier,
    cfg: &TtaConfig,
) -> Result<TtaOutcome> {
    let mut adapters = AdapterPair::identity(v.cols(), cfg.tau, cfg.tau_ref)?;
    let s_fs = stream_fewshot(clf, v)?;
    let mut vel_v = Array2::<f64>::zeros(adapters.vision.dim());
    let mut vel_t = Array2::<f64>::zeros(adapters.text.dim());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        let eval = adaptation_objective(v, refs, t, &s_fs, &adapters)?;
        if !eval.loss.is_finite() {
            return Err(SpaError::NonFiniteLoss { step });
        }
        trace.push(eval.loss);
        vel_v = vel_v * cfg.momentum + &eval.grad_vision;
        vel_t = vel_t * cfg.momentum + &eval.grad_text;
        adapters.vision.scaled_add(-cfg.lr, &vel_v);
        adapters.text.scaled_add(-cfg.lr, &vel_t);
    }
    Ok(TtaOutcome { adapters, loss_trace: trace })
}

/// Weighted arithmetic mean of the three streams.
pub fn fuse_streams(s: &StreamBundle, weights: [f64; 3]) -> Result<ProbMatrix> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SpaError::WeightViolation(weights.to_vec()));
    }
    check_same_shape(s.s_ref.as_array(), s.s_vl.as_array())?;
    check_same_shape(s.s_ref.as_array(), s.s_fs.as_array())?;
    let mut fused = s.s_ref.as_array() * weights[0];
    fused.scaled_add(weights[1], s.s_vl.as_array());
    fused.scaled_add(weights[2], s.s_fs.as_array());
    Ok(ProbMatrix::from_trusted(fused))
}

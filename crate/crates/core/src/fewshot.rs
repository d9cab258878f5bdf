//! Text-blended linear classifier over frozen embeddings.
//!
//! Each phase `k` owns a learnable vision prototype `w_k` and a learnable
//! scalar `alpha_k` that blends in the frozen text embedding `t_k`:
//!
//! ```text
//! p_ik = softmax_k( f_i . (w_k + alpha_k t_k) )
//! ```
//!
//! Training is full-batch gradient descent on the mean cross-entropy; `t`
//! never changes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embedding_pair, save_embedding_pair, write_file, EmbeddingMatrix, LabelSequence,
};
use crate::error::{Result, SpaError};
use crate::probs::ProbMatrix;

/// Clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotClassifier {
    prototypes: Array2<f64>,
    multipliers: Array1<f64>,
    text: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Stop once the loss improved by less than `early_stop_tol` over this many steps.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.01, steps: 500, early_stop_window: 20, early_stop_tol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub prototypes: Array2<f64>,
    pub multipliers: Array1<f64>,
}

pub(crate) fn check_unit_rows(m: &Array2<f64>) -> Result<()> {
    for (row, r) in m.axis_iter(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(SpaError::NormViolation { row, norm });
        }
    }
    Ok(())
}

impl FewShotClassifier {
    /// Zero prototypes and unit multipliers, i.e. the zero-shot text classifier.
    ///
    /// Initialization draws no randomness; `_seed` is accepted so callers can
    /// thread one seed through every stage.
    pub fn init(text: &EmbeddingMatrix, _seed: u64) -> Result<Self> {
        check_unit_rows(text.as_array())?;
        let (k, d) = text.as_array().dim();
        Ok(Self {
            prototypes: Array2::zeros((k, d)),
            multipliers: Array1::ones(k),
            text: text.as_array().clone(),
        })
    }

    pub fn from_parts(prototypes: Array2<f64>, multipliers: Array1<f64>, text: Array2<f64>) -> Result<Self> {
        if prototypes.dim() != text.dim() || multipliers.len() != text.nrows() {
            return Err(SpaError::DimensionMismatch(format!(
                "prototypes {:?}, multipliers {}, text {:?}",
                prototypes.dim(),
                multipliers.len(),
                text.dim()
            )));
        }
        if prototypes.iter().chain(multipliers.iter()).any(|v| !v.is_finite()) {
            return Err(SpaError::NonFiniteValue { index: 0 });
        }
        check_unit_rows(&text)?;
        Ok(Self { prototypes, multipliers, text })
    }

    pub fn k(&self) -> usize {
        self.text.nrows()
    }

    pub fn d(&self) -> usize {
        self.text.ncols()
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn multipliers(&self) -> &Array1<f64> {
        &self.multipliers
    }

    pub fn text(&self) -> &Array2<f64> {
        &self.text
    }

    /// `w_k + alpha_k t_k` stacked as a `K x D` matrix.
    pub fn blended_prototypes(&self) -> Array2<f64> {
        let mut b = self.text.clone();
        for (mut row, &a) in b.axis_iter_mut(Axis(0)).zip(self.multipliers.iter()) {
            row *= a;
        }
        b + &self.prototypes
    }

    fn check_dim(&self, f: &EmbeddingMatrix) -> Result<()> {
        if f.cols() != self.d() {
            return Err(SpaError::DimensionMismatch(format!(
                "embeddings have {} columns, classifier expects {}",
                f.cols(),
                self.d()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, f: &EmbeddingMatrix) -> Result<Array2<f64>> {
        self.check_dim(f)?;
        Ok(f.as_array().dot(&self.blended_prototypes().t()))
    }

    pub fn predict_proba(&self, f: &EmbeddingMatrix) -> Result<ProbMatrix> {
        Ok(ProbMatrix::softmax(&self.logits(f)?))
    }

    /// Mean cross-entropy and its exact gradients with respect to `w` and `alpha`.
    pub fn ce_loss_and_grads(&self, f: &EmbeddingMatrix, y: &LabelSequence) -> Result<Gradients> {
        y.check_paired(f)?;
        let k = self.k();
        if let Some((position, &value)) = y.as_slice().iter().enumerate().find(|(_, &v)| v >= k) {
            return Err(SpaError::OutOfRangeLabel { position, value, k });
        }
        let probs = self.predict_proba(f)?.into_inner();
        let n = y.len() as f64;

        let mut loss = 0.0;
        // dLoss/dlogits, with the clamp treated as a hard floor.
        let mut grad_logits = Array2::zeros(probs.dim());
        for (i, &label) in y.as_slice().iter().enumerate() {
            let p = probs[[i, label]];
            loss -= p.max(PROB_FLOOR).ln();
            if p > PROB_FLOOR {
                for j in 0..k {
                    grad_logits[[i, j]] = probs[[i, j]] / n;
                }
                grad_logits[[i, label]] -= 1.0 / n;
            }
        }
        loss /= n;

        // logits = F . B^T  =>  dB = dlogits^T . F
        let grad_blend = grad_logits.t().dot(f.as_array());
        let grad_alpha = Array1::from_iter(
            grad_blend.axis_iter(Axis(0)).zip(self.text.axis_iter(Axis(0))).map(|(g, t)| g.dot(&t)),
        );
        Ok(Gradients { loss, prototypes: grad_blend, multipliers: grad_alpha })
    }

    /// Full-batch gradient descent. Returns the trained classifier and the
    /// loss measured before each update.
    pub fn train(&self, f: &EmbeddingMatrix, y: &LabelSequence, cfg: &TrainConfig) -> Result<(Self, Vec<f64>)> {
        let mut clf = self.clone();
        let mut trace = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let g = clf.ce_loss_and_grads(f, y)?;
            if !g.loss.is_finite() {
                return Err(SpaError::NonFiniteLoss { step });
            }
            trace.push(g.loss);
            clf.prototypes.scaled_add(-cfg.lr, &g.prototypes);
            clf.multipliers.scaled_add(-cfg.lr, &g.multipliers);
            if clf.prototypes.iter().chain(clf.multipliers.iter()).any(|v| !v.is_finite()) {
                return Err(SpaError::NonFiniteLoss { step });
            }
            let w = cfg.early_stop_window;
            if w > 0 && trace.len() > w && trace[trace.len() - 1 - w] - g.loss < cfg.early_stop_tol {
                break;
            }
        }
        Ok((clf, trace))
    }

    pub fn accuracy(&self, f: &EmbeddingMatrix, y: &LabelSequence) -> Result<f64> {
        y.check_paired(f)?;
        let pred = self.predict_proba(f)?.argmax();
        let hits = pred.iter().zip(y.as_slice()).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / y.len().max(1) as f64)
    }

    /// Writes `classifier.json`, `prototypes.{json,bin}` and `text.{json,bin}` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta { k: self.k(), d: self.d(), alpha: self.multipliers.to_vec() };
        write_file(&dir.join("classifier.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        save_embedding_pair(&self.prototypes, &dir.join("prototypes.json"))?;
        save_embedding_pair(&self.text, &dir.join("text.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("classifier.json");
        let text = fs::read_to_string(&path).map_err(|e| SpaError::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let prototypes = load_embedding_pair(&dir.join("prototypes.json"))?.into_inner();
        let text_emb = load_embedding_pair(&dir.join("text.json"))?.into_inner();
        if prototypes.dim() != (meta.k, meta.d) {
            return Err(SpaError::DimensionMismatch("checkpoint prototype shape".into()));
        }
        Self::from_parts(prototypes, Array1::from(meta.alpha), text_emb)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    k: usize,
    d: usize,
    alpha: Vec<f64>,
}

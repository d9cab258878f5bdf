//! Row-stochastic `L x K` phase probability matrices.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};

const ROW_SUM_TOL: f64 = 1e-6;

/// Per-frame phase probabilities. Every row lies in the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(SpaError::InvalidProbabilities("zero phases".into()));
        }
        for (i, row) in data.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p)) {
                return Err(SpaError::InvalidProbabilities(format!("row {i} has an entry outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(SpaError::InvalidProbabilities(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(data))
    }

    /// Wraps data produced by a softmax or a convex combination of valid rows.
    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        debug_assert!(data.axis_iter(Axis(0)).all(|r| (r.sum() - 1.0).abs() < 1e-6));
        Self(data)
    }

    /// Row-wise softmax of `logits`.
    pub fn softmax(logits: &Array2<f64>) -> Self {
        Self(softmax_rows(logits))
    }

    pub fn uniform(rows: usize, k: usize) -> Self {
        Self(Array2::from_elem((rows, k), 1.0 / k as f64))
    }

    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut data = Array2::zeros((labels.len(), k));
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(SpaError::OutOfRangeLabel { position: i, value: l, k });
            }
            data[[i, l]] = 1.0;
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(SpaError::DimensionMismatch("ragged probability rows".into()));
        }
        let flat = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), k), flat)
            .map_err(|e| SpaError::DimensionMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    }

    /// Per-row argmax, ties resolved towards the lowest phase index.
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean Shannon entropy (nats) over rows.
    pub fn mean_entropy(&self) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        let total: f64 = self
            .0
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
            .sum();
        total / self.rows() as f64
    }
}

impl Serialize for ProbMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ProbMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        ProbMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Numerically stable row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backpropagates `grad_out` through a row-wise softmax whose output was `probs`.
pub(crate) fn softmax_rows_backward(probs: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut grad_in = probs * grad_out;
    for (mut g, p) in grad_in.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
        let inner = g.sum();
        g.zip_mut_with(&p, |gv, &pv| *gv -= pv * inner);
    }
    grad_in
}

//! Frame-wise phase recognition metrics and their aggregation across videos.

use serde::{Deserialize, Serialize};

use crate::embedding::{run_count, LabelSequence};
use crate::error::{Result, SpaError};

/// Averaging protocol stated in every report.
pub const F1_PROTOCOL: &str = "frame-wise per-phase F1 from the KxK confusion matrix, macro-averaged over phases \
present in each video's ground truth, then mean and population std across videos";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_phase_f1: Vec<f64>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub segment_count: usize,
    pub edit_distance_segments: usize,
}

fn segment_labels(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn evaluate(pred: &LabelSequence, gt: &LabelSequence, k: usize) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(SpaError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let pred = LabelSequence::new(pred.0.clone(), k)?;
    let gt = LabelSequence::new(gt.0.clone(), k)?;
    // confusion[g][p]
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        confusion[g][p] += 1;
    }
    let mut per_phase_f1 = vec![0.0; k];
    let mut present = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let gt_count: usize = confusion[c].iter().sum();
        let pred_count: usize = confusion.iter().map(|row| row[c]).sum();
        if tp > 0 {
            per_phase_f1[c] = 2.0 * tp as f64 / (gt_count + pred_count) as f64;
        }
        if gt_count > 0 {
            present.push(per_phase_f1[c]);
        }
    }
    let macro_f1 = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let hits: usize = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = if gt.is_empty() { 0.0 } else { hits as f64 / gt.len() as f64 };
    Ok(Metrics {
        per_phase_f1,
        macro_f1,
        accuracy,
        segment_count: run_count(pred.as_slice()),
        edit_distance_segments: levenshtein(&segment_labels(pred.as_slice()), &segment_labels(gt.as_slice())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics, computed over sorted values so the result does
    /// not depend on input order.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        Self { mean, std: (dev.iter().sum::<f64>() / n).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMetrics {
    pub name: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub videos: usize,
    pub macro_f1: MeanStd,
    pub accuracy: MeanStd,
    pub segment_count: MeanStd,
    pub edit_distance_segments: MeanStd,
    pub per_video: Vec<NamedMetrics>,
    pub config: serde_json::Value,
}

pub fn report(per_video: &[NamedMetrics], config: serde_json::Value) -> Report {
    let pick = |f: &dyn Fn(&Metrics) -> f64| MeanStd::of(&per_video.iter().map(|m| f(&m.metrics)).collect::<Vec<_>>());
    Report {
        protocol: F1_PROTOCOL.into(),
        videos: per_video.len(),
        macro_f1: pick(&|m| m.macro_f1),
        accuracy: pick(&|m| m.accuracy),
        segment_count: pick(&|m| m.segment_count as f64),
        edit_distance_segments: pick(&|m| m.edit_distance_segments as f64),
        per_video: per_video.to_vec(),
        config,
    }
}

impl Report {
    pub fn text_table(&self) -> String {
        let mut out = format!("# {}\n", self.protocol);
        out.push_str(&format!("{:<24} {:>9} {:>9} {:>9} {:>9}\n", "video", "macroF1", "acc", "segments", "edit"));
        for v in &self.per_video {
            out.push_str(&format!(
                "{:<24} {:>9.2} {:>9.2} {:>9} {:>9}\n",
                v.name,
                100.0 * v.metrics.macro_f1,
                100.0 * v.metrics.accuracy,
                v.metrics.segment_count,
                v.metrics.edit_distance_segments
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>9.1} {:>9.1}\n",
            format!("mean ({} videos)", self.videos),
            format!("{:.2}±{:.2}", 100.0 * self.macro_f1.mean, 100.0 * self.macro_f1.std),
            format!("{:.2}", 100.0 * self.accuracy.mean),
            self.segment_count.mean,
            self.edit_distance_segments.mean
        ));
        out
    }
}

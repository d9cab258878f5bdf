//! Embedding matrices, label sequences and reference sets on disk.
//!
//! Matrices are stored as a JSON header (`<name>.json`) next to a raw
//! payload (`<name>.bin`) of little-endian `f32` values in row-major order.
//! Everything is widened to `f64` once loaded.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};

/// An `L x D` matrix of frame (or reference, or text) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(SpaError::DimensionMismatch(format!(
                "embedding matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpaError::NonFiniteValue { index });
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SpaError::DimensionMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|e| SpaError::DimensionMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
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

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.0
            .axis_iter(Axis(0))
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-frame phase labels.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((position, &value)) = labels.iter().enumerate().find(|(_, &v)| v >= k) {
            return Err(SpaError::OutOfRangeLabel { position, value, k });
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Checks that this sequence labels every row of `m`.
    pub fn check_paired(&self, m: &EmbeddingMatrix) -> Result<()> {
        if self.len() != m.rows() {
            return Err(SpaError::DimensionMismatch(format!(
                "{} labels for {} embedding rows",
                self.len(),
                m.rows()
            )));
        }
        Ok(())
    }

    /// Number of maximal constant runs.
    pub fn run_count(&self) -> usize {
        run_count(&self.0)
    }
}

pub(crate) fn run_count(labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    1 + labels.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Labelled reference embeddings `R` with their one-hot class associations `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    embeddings: EmbeddingMatrix,
    labels: Vec<usize>,
    assoc: Array2<f64>,
}

impl ReferenceSet {
    pub fn new(embeddings: EmbeddingMatrix, labels: &LabelSequence, k: usize) -> Result<Self> {
        labels.check_paired(&embeddings)?;
        let labels = LabelSequence::new(labels.0.clone(), k)?.0;
        let mut assoc = Array2::zeros((labels.len(), k));
        for (row, &label) in labels.iter().enumerate() {
            assoc[[row, label]] = 1.0;
        }
        Ok(Self { embeddings, labels, assoc })
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn labels(&self) -> LabelSequence {
        LabelSequence(self.labels.clone())
    }

    /// `N x K` one-hot association matrix.
    pub fn assoc(&self) -> &Array2<f64> {
        &self.assoc
    }

    pub fn k(&self) -> usize {
        self.assoc.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shots_per_phase(&self) -> Vec<usize> {
        self.assoc.sum_axis(Axis(0)).iter().map(|&c| c as usize).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    dtype: String,
    byte_order: String,
    layout: String,
}

/// Path of the binary payload paired with a header path (`x.json` -> `x.bin`).
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn load_embedding_matrix(header_path: &Path, data_path: &Path) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(header_path).map_err(|e| SpaError::io(header_path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| SpaError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" || header.byte_order != "little" || header.layout != "row-major" {
        return Err(SpaError::MalformedHeader(format!(
            "unsupported encoding dtype={} byte_order={} layout={}",
            header.dtype, header.byte_order, header.layout
        )));
    }
    if header.rows == 0 || header.cols == 0 {
        return Err(SpaError::MalformedHeader(format!(
            "shape {}x{} is empty",
            header.rows, header.cols
        )));
    }
    let bytes = fs::read(data_path).map_err(|e| SpaError::io(data_path, e))?;
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SpaError::MalformedHeader("shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(SpaError::SizeMismatch { expected, actual: bytes.len() });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| SpaError::MalformedHeader(e.to_string()))?;
    EmbeddingMatrix::new(data)
}

/// Convenience for the `<name>.json` + `<name>.bin` convention.
pub fn load_embedding_pair(header_path: &Path) -> Result<EmbeddingMatrix> {
    load_embedding_matrix(header_path, &payload_path(header_path))
}

pub fn save_embedding_matrix(m: &Array2<f64>, header_path: &Path, data_path: &Path) -> Result<()> {
    let header = Header {
        rows: m.nrows(),
        cols: m.ncols(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: "row-major".into(),
    };
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_file(header_path, serde_json::to_string_pretty(&header)?.as_bytes())?;
    write_file(data_path, &bytes)
}

pub fn save_embedding_pair(m: &Array2<f64>, header_path: &Path) -> Result<()> {
    save_embedding_matrix(m, header_path, &payload_path(header_path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SpaError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| SpaError::io(path, e))
}

pub fn load_labels(path: &Path, k: usize) -> Result<LabelSequence> {
    let text = fs::read_to_string(path).map_err(|e| SpaError::io(path, e))?;
    parse_labels(&text, k)
}

pub fn parse_labels(text: &str, k: usize) -> Result<LabelSequence> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: usize = line.parse().map_err(|e: std::num::ParseIntError| SpaError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        labels.push(value);
    }
    LabelSequence::new(labels, k)
}

pub fn save_labels(labels: &LabelSequence, path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels.as_slice() {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.0.clone();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            return Err(SpaError::ZeroRow { row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingMatrix(out))
}

/// Applies [`l2_normalize`] when `enabled`, otherwise passes the matrix through.
pub fn maybe_normalize(m: EmbeddingMatrix, enabled: bool) -> Result<EmbeddingMatrix> {
    if enabled {
        l2_normalize(&m)
    } else {
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilePair {
    pub header: PathBuf,
    pub data: PathBuf,
}

/// `{"k": K, "phases": [[{"header": .., "data": ..}, ..], ..]}`; entry `i`
/// of `phases` lists matrices whose rows are all references of phase `i`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceManifest {
    pub k: usize,
    pub phases: Vec<Vec<FilePair>>,
}

pub fn load_reference_set(manifest_path: &Path, normalize: bool) -> Result<ReferenceSet> {
    let text = fs::read_to_string(manifest_path).map_err(|e| SpaError::io(manifest_path, e))?;
    let manifest: ReferenceManifest =
        serde_json::from_str(&text).map_err(|e| SpaError::MalformedHeader(e.to_string()))?;
    if manifest.phases.len() != manifest.k {
        return Err(SpaError::MalformedHeader(format!(
            "manifest declares k={} but lists {} phases",
            manifest.k,
            manifest.phases.len()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (phase, pairs) in manifest.phases.iter().enumerate() {
        for pair in pairs {
            let m = load_embedding_matrix(&base.join(&pair.header), &base.join(&pair.data))?;
            for r in m.view().axis_iter(Axis(0)) {
                rows.push(r.to_vec());
                labels.push(phase);
            }
        }
    }
    if rows.is_empty() {
        return Err(SpaError::EmptyDataset);
    }
    let embeddings = maybe_normalize(EmbeddingMatrix::from_rows(&rows)?, normalize)?;
    ReferenceSet::new(embeddings, &LabelSequence(labels), manifest.k)
}

/// Writes one `phase_<k>` matrix per phase under `dir` and a manifest at `manifest_path`.
pub fn save_reference_set(refs: &ReferenceSet, manifest_path: &Path, dir_name: &str) -> Result<()> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let emb = refs.embeddings().view();
    let mut phases = Vec::with_capacity(refs.k());
    for phase in 0..refs.k() {
        let idx: Vec<usize> = (0..refs.len()).filter(|&i| refs.labels[i] == phase).collect();
        if idx.is_empty() {
            phases.push(Vec::new());
            continue;
        }
        let m = emb.select(Axis(0), &idx);
        let header = PathBuf::from(dir_name).join(format!("phase_{phase}.json"));
        let data = PathBuf::from(dir_name).join(format!("phase_{phase}.bin"));
        save_embedding_matrix(&m, &base.join(&header), &base.join(&data))?;
        phases.push(vec![FilePair { header, data }]);
    }
    let manifest = ReferenceManifest { k: refs.k(), phases };
    write_file(manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_header(dir: &Path, rows: usize, cols: usize) -> PathBuf {
        let p = dir.join("m.json");
        fs::write(
            &p,
            format!(
                r#"{{"rows":{rows},"cols":{cols},"dtype":"f32","byte_order":"little","layout":"row-major"}}"#
            ),
        )
        .unwrap();
        p
    }

    #[test]
    fn loads_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_header(dir.path(), 2, 3);
        let bytes: Vec<u8> = (0..6).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(dir.path().join("m.bin"), bytes).unwrap();
        let m = load_embedding_pair(&h).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.as_array()[[1, 2]], 5.0);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_header(dir.path(), 2, 3);
        fs::write(dir.path().join("m.bin"), vec![0u8; 20]).unwrap();
        assert!(matches!(
            load_embedding_pair(&h),
            Err(SpaError::SizeMismatch { expected: 24, actual: 20 })
        ));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_header(dir.path(), 1, 2);
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&0x7fc0_0000u32.to_le_bytes());
        fs::write(dir.path().join("m.bin"), bytes).unwrap();
        assert!(matches!(load_embedding_pair(&h), Err(SpaError::NonFiniteValue { index: 1 })));
    }

    #[test]
    fn bad_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let h = dir.path().join("m.json");
        fs::write(&h, r#"{"rows":1,"cols":1,"dtype":"f64","byte_order":"little","layout":"row-major"}"#)
            .unwrap();
        fs::write(dir.path().join("m.bin"), [0u8; 8]).unwrap();
        assert!(matches!(load_embedding_pair(&h), Err(SpaError::MalformedHeader(_))));
        fs::write(&h, "{\"rows\":1}").unwrap();
        assert!(matches!(load_embedding_pair(&h), Err(SpaError::MalformedHeader(_))));
    }

    #[test]
    fn labels_parse_and_range_check() {
        assert_eq!(parse_labels("0\n0\n1\n", 2).unwrap().0, vec![0, 0, 1]);
        assert!(matches!(
            parse_labels("0\n5\n", 2),
            Err(SpaError::OutOfRangeLabel { position: 1, value: 5, k: 2 })
        ));
        assert!(matches!(parse_labels("0\nx\n", 2), Err(SpaError::ParseError { line: 2, .. })));
    }

    #[test]
    fn empty_labels_fail_only_when_paired() {
        let labels = parse_labels("", 3).unwrap();
        assert!(labels.is_empty());
        let m = EmbeddingMatrix::new(array![[1.0, 0.0]]).unwrap();
        assert!(matches!(labels.check_paired(&m), Err(SpaError::DimensionMismatch(_))));
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::new(array![[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!((n.as_array()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((n.as_array()[[0, 1]] - 0.8).abs() < 1e-15);
        assert!((n.as_array()[[1, 0]] - 1.0).abs() < 1e-12);
        let z = EmbeddingMatrix::new(array![[1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&z), Err(SpaError::ZeroRow { row: 1 })));
    }

    #[test]
    fn reference_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = l2_normalize(
            &EmbeddingMatrix::new(array![[1.0, 0.1], [0.9, 0.2], [0.0, 1.0], [0.1, 1.0]]).unwrap(),
        )
        .unwrap();
        let refs = ReferenceSet::new(emb, &LabelSequence(vec![0, 0, 1, 1]), 2).unwrap();
        assert_eq!(refs.shots_per_phase(), vec![2, 2]);
        let manifest = dir.path().join("refs.json");
        save_reference_set(&refs, &manifest, "refs").unwrap();
        let back = load_reference_set(&manifest, true).unwrap();
        assert_eq!(back.labels(), refs.labels());
        assert_eq!(back.assoc(), refs.assoc());
        let diff = (back.embeddings().as_array() - refs.embeddings().as_array())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-6);
    }
}

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spa_core::embedding::EmbeddingMatrix;
use spa_core::task_graph::TaskGraph;

pub fn branching_graph() -> TaskGraph {
    TaskGraph::parse(include_str!("../fixtures/branching_graph.json")).unwrap()
}

/// Linear chain 0 -> 1 -> ... -> k-1 with identical duration bounds.
pub fn chain_graph(k: usize, min: usize, max: usize) -> TaskGraph {
    let phases: Vec<String> = (0..k)
        .map(|i| {
            format!(
                r#"{{"id":{i},"name":"p{i}","min_duration":{min},"max_duration":{max},"start":{},"terminal":{}}}"#,
                i == 0,
                i + 1 == k
            )
        })
        .collect();
    let edges: Vec<String> = (1..k).map(|i| format!("[{},{i}]", i - 1)).collect();
    TaskGraph::parse(&format!(r#"{{"phases":[{}],"edges":[{}]}}"#, phases.join(","), edges.join(","))).unwrap()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = gaussian(rows, cols, &mut rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    EmbeddingMatrix::new(m).unwrap()
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

use crate::error::{GazeError, Result};

/// Stored training set for k-nearest-neighbor regression.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `n x dim`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub const DEFAULT_K: usize = 3;

pub fn fit_knn(x: &[Vec<f64>], y: &[f64], k: usize) -> Result<KnnModel> {
    if x.is_empty() {
        return Err(GazeError::domain("kNN needs at least one training sample"));
    }
    if x.len() != y.len() {
        return Err(GazeError::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if k == 0 || k > x.len() {
        return Err(GazeError::domain(format!("k = {k} outside 1..={}", x.len())));
    }
    let dim = x[0].len();
    let mut flat = Vec::with_capacity(x.len() * dim);
    for row in x {
        if row.len() != dim {
            return Err(GazeError::DimensionMismatch { expected: dim, got: row.len() });
        }
        flat.extend_from_slice(row);
    }
    Ok(KnnModel { k, dim, x: flat, y: y.to_vec() })
}

impl KnnModel {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Indices of the `k` nearest training rows, nearest first; equal
    /// distances keep the lower index first.
    pub fn neighbors(&self, q: &[f64], k: usize) -> Result<Vec<usize>> {
        if q.len() != self.dim {
            return Err(GazeError::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        if k == 0 || k > self.len() {
            return Err(GazeError::domain(format!("k = {k} outside 1..={}", self.len())));
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, row) in self.x.chunks_exact(self.dim.max(1)).take(self.len()).enumerate() {
            let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(k);
        }
        Ok(best.into_iter().map(|(_, i)| i).collect())
    }

    pub fn predict(&self, q: &[f64]) -> Result<f64> {
        self.predict_k(q, self.k)
    }

    pub fn predict_k(&self, q: &[f64], k: usize) -> Result<f64> {
        let idx = self.neighbors(q, k)?;
        Ok(idx.iter().map(|&i| self.y[i]).sum::<f64>() / k as f64)
    }
}

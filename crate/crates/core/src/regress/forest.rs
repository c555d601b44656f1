use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// Bootstrap sample size as a fraction of the training set, drawn with
    /// replacement.
    pub bootstrap_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            mtry: None,
            min_leaf: 5,
            bootstrap_fraction: 1.0,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn mtry_for(&self, dim: usize) -> usize {
        self.mtry.unwrap_or(dim.div_ceil(3))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Leaf { value: f64 },
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfModel {
    pub dim: usize,
    pub trees: Vec<Tree>,
}

struct Grower<'a> {
    x: &'a [f64],
    dim: usize,
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
}

impl Grower<'_> {
    fn value(&self, i: usize, f: usize) -> f64 {
        self.x[i * self.dim + f]
    }

    fn grow(&self, idx: &mut [usize], rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> usize {
        let at = nodes.len();
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mean = total / n as f64;
        nodes.push(Node::Leaf { value: mean });
        if n < 2 * self.min_leaf || idx.iter().all(|&i| self.y[i] == self.y[idx[0]]) {
            return at;
        }

        // maximize sum_l^2/n_l + sum_r^2/n_r, i.e. the drop in squared error
        let parent = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in sample(rng, self.dim, self.mtry).into_iter() {
            order.sort_by(|&a, &b| self.value(a, f).total_cmp(&self.value(b, f)).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.y[order[k - 1]];
                if k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (self.value(order[k - 1], f), self.value(order[k], f));
                if lo >= hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
                if score > parent && best.map_or(true, |(s, _, _)| score > s) {
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some((score, f, if mid < hi { mid } else { lo }));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let mut split = 0;
        for k in 0..n {
            if self.value(idx[k], feature) <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, rng, nodes);
        let right = self.grow(r, rng, nodes);
        nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

pub fn fit_rf(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<RfModel> {
    let n = x.len();
    if n != y.len() {
        return Err(GazeError::DimensionMismatch { expected: n, got: y.len() });
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(GazeError::domain("forest needs n_trees >= 1 and min_leaf >= 1"));
    }
    if n < 2 * params.min_leaf {
        return Err(GazeError::domain(format!("{n} samples is fewer than 2 * min_leaf = {}", 2 * params.min_leaf)));
    }
    if !(params.bootstrap_fraction > 0.0 && params.bootstrap_fraction <= 1.0) {
        return Err(GazeError::domain(format!("bootstrap fraction {} outside (0, 1]", params.bootstrap_fraction)));
    }
    let dim = x[0].len();
    let mtry = params.mtry_for(dim);
    if dim == 0 || mtry == 0 || mtry > dim {
        return Err(GazeError::domain(format!("mtry {mtry} outside 1..={dim}")));
    }
    let mut flat = Vec::with_capacity(n * dim);
    for row in x {
        if row.len() != dim {
            return Err(GazeError::DimensionMismatch { expected: dim, got: row.len() });
        }
        flat.extend_from_slice(row);
    }
    let grower = Grower {
        x: &flat,
        dim,
        y,
        mtry,
        min_leaf: params.min_leaf,
    };
    let draws = ((params.bootstrap_fraction * n as f64).round() as usize).max(1);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(params.seed, "tree", t as u64);
            let mut idx: Vec<usize> = (0..draws).map(|_| rng.gen_range(0..n)).collect();
            let mut nodes = Vec::new();
            grower.grow(&mut idx, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect();
    Ok(RfModel { dim, trees })
}

impl RfModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(GazeError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }
}

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{loso_cv, loso_subjects, PipelineConfig};
use crate::error::{GazeError, Result};
use crate::features::Descriptor;
use crate::pipeline::PreparedSet;
use crate::regress::{RegressorKind, RegressorParams};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub descriptor: Descriptor,
    pub regressor: RegressorKind,
    pub mean_error_cm: f64,
    pub std_error_cm: f64,
    pub sample_count: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn get(&self, descriptor: Descriptor, regressor: RegressorKind) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.descriptor == descriptor && c.regressor == regressor)
    }

    pub fn best(&self) -> Option<&SweepCell> {
        self.cells.iter().min_by(|a, b| a.mean_error_cm.total_cmp(&b.mean_error_cm))
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        let mut out = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.descriptor) {
                out.push(c.descriptor);
            }
        }
        out
    }

    pub fn regressors(&self) -> Vec<RegressorKind> {
        let mut out = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.regressor) {
                out.push(c.regressor);
            }
        }
        out
    }

    /// Regressor rows by descriptor columns, mean error in cm; the last
    /// column carries the run fingerprint.
    pub fn write_csv(&self, path: &std::path::Path, fingerprint: &str) -> Result<()> {
        let descriptors = self.descriptors();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["regressor".to_string()];
        header.extend(descriptors.iter().map(|d| d.to_string()));
        header.push("fingerprint".into());
        w.write_record(&header)?;
        for r in self.regressors() {
            let mut row = vec![r.to_string()];
            for &d in &descriptors {
                row.push(self.get(d, r).map_or(String::new(), |c| format!("{:.4}", c.mean_error_cm)));
            }
            row.push(fingerprint.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| GazeError::io(path, e))
    }
}

/// LOSO mean error for every descriptor (one prepared set each) and regressor.
pub fn sweep(sets: &[PreparedSet], regressors: &[RegressorKind], base: &PipelineConfig) -> Result<SweepTable> {
    let mut cells = Vec::new();
    for &kind in regressors {
        for set in sets {
            let cfg = PipelineConfig {
                descriptor: set.descriptor,
                regressor: RegressorParams { kind, ..base.regressor.clone() },
                ..base.clone()
            };
            let out = loso_cv(set, &cfg)?;
            log::info!("sweep {} + {}: {:.3} cm", set.descriptor, kind, out.report.mean_error_cm);
            cells.push(SweepCell {
                descriptor: set.descriptor,
                regressor: kind,
                mean_error_cm: out.report.mean_error_cm,
                std_error_cm: out.report.std_error_cm,
                sample_count: out.report.sample_count,
                fingerprint: out.report.fingerprint,
            });
        }
    }
    Ok(SweepTable { cells })
}

/// Training-group sizes for `n` subjects: 2, 3, 4, about three quarters of
/// `n`, and `n`.
pub fn suggested_sizes(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [2, 3, 4, (3 * n + 2) / 4, n].into_iter().filter(|&k| k >= 2 && k <= n).collect();
    v.sort_unstable();
    v.dedup();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub k: usize,
    /// Mean error of each repeat; a single entry when `k` covers every subject.
    pub repeat_errors_cm: Vec<f64>,
    pub mean_error_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeCurve {
    pub points: Vec<SizePoint>,
    /// Rank correlation between `k` and mean error.
    pub spearman_rho: f64,
    pub fingerprint: String,
}

impl SizeCurve {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "repeats", "mean_error_cm", "fingerprint"])?;
        for p in &self.points {
            w.write_record([p.k.to_string(), p.repeat_errors_cm.len().to_string(), format!("{:.4}", p.mean_error_cm), self.fingerprint.clone()])?;
        }
        w.flush().map_err(|e| GazeError::io(path, e))
    }
}

/// For each `k`: draw `k` subjects, run LOSO among them, average over
/// `repeats` draws.
pub fn size_study(set: &PreparedSet, sizes: &[usize], repeats: usize, cfg: &PipelineConfig) -> Result<SizeCurve> {
    let subjects = set.subjects();
    let n = subjects.len();
    if repeats == 0 {
        return Err(GazeError::domain("size study needs at least one repeat"));
    }
    if let Some(&bad) = sizes.iter().find(|&&k| k < 2 || k > n) {
        return Err(GazeError::domain(format!("group size {bad} outside 2..={n}")));
    }
    let mut points = Vec::new();
    for &k in sizes {
        let draws = if k == n { 1 } else { repeats };
        let mut errs = Vec::with_capacity(draws);
        for r in 0..draws {
            let mut rng = seed::rng(cfg.seed, &format!("size-{k}"), r as u64);
            let mut chosen: Vec<usize> = sample(&mut rng, n, k).into_vec();
            chosen.sort_unstable();
            let group: Vec<String> = chosen.into_iter().map(|i| subjects[i].clone()).collect();
            errs.push(loso_subjects(set, &group, cfg)?.report.mean_error_cm);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        log::info!("size study k={k}: {mean:.3} cm over {} draw(s)", errs.len());
        points.push(SizePoint {
            k,
            repeat_errors_cm: errs,
            mean_error_cm: mean,
        });
    }
    let ks: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let es: Vec<f64> = points.iter().map(|p| p.mean_error_cm).collect();
    Ok(SizeCurve {
        spearman_rho: spearman(&ks, &es),
        points,
        fingerprint: cfg.fingerprint(&set.corpus_fingerprint),
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // monotone transform does not matter
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]), 1.0);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn sizes_for_eight_subjects() {
        assert_eq!(suggested_sizes(8), vec![2, 3, 4, 6, 8]);
        assert_eq!(suggested_sizes(3), vec![2, 3]);
        assert_eq!(suggested_sizes(41), vec![2, 3, 4, 31, 41]);
    }
}

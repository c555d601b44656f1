//! PCA followed by LDA over the grid classes.
//!
//! LDA needs a nonsingular within-class scatter, which high-dimensional
//! appearance features do not give; PCA first brings the dimension below
//! `n - c`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GazeError, Result};

/// Lower bound on the PCA target dimension.
pub const PCA_FLOOR: usize = 200;
/// Within-class scatter ridge, relative to its mean diagonal.
pub const LDA_RIDGE: f64 = 1e-6;

/// Fitted `x -> lda^T pca^T (x - mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionModel {
    pub input_dim: usize,
    pub pca_mean: DVector<f64>,
    /// `input_dim x p`, orthonormal columns.
    pub pca_basis: DMatrix<f64>,
    /// `p x (class_count - 1)`.
    pub lda_basis: DMatrix<f64>,
    pub class_count: usize,
    composed: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Lda {
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Makes the largest-magnitude entry of every column positive.
fn fix_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenpairs of a symmetric matrix, largest first; ties keep index order.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (mean, xc)
}

/// Modified Gram-Schmidt, applied twice.
fn orthonormalize(m: &mut DMatrix<f64>) -> Result<()> {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for k in 0..j {
                let proj = m.column(k).dot(&m.column(j));
                let prev = m.column(k).clone_owned();
                m.column_mut(j).axpy(-proj, &prev, 1.0);
            }
            let norm = m.column(j).norm();
            if !(norm > 1e-12) {
                return Err(GazeError::Numerical(format!("PCA direction {j} collapsed during orthonormalization")));
            }
            m.column_mut(j).unscale_mut(norm);
        }
    }
    Ok(())
}

/// Top-`target` principal directions of the rows of `x` (samples x dim).
///
/// Uses the `dim x dim` covariance when `dim <= samples` and the
/// `samples x samples` Gram matrix otherwise.
pub fn fit_pca(x: &DMatrix<f64>, target: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(GazeError::domain("PCA needs at least 2 samples"));
    }
    if target == 0 || target > (n - 1).min(d) {
        return Err(GazeError::domain(format!(
            "PCA target {target} outside 1..={} for {n} samples of dimension {d}",
            (n - 1).min(d)
        )));
    }
    let (mean, xc) = center(x);
    let denom = (n - 1) as f64;
    let (eigenvalues, mut basis) = if d <= n {
        let cov = xc.tr_mul(&xc) / denom;
        let (vals, vecs) = sorted_eigen(cov);
        (vals[..target].to_vec(), vecs.columns(0, target).into_owned())
    } else {
        let gram = &xc * xc.transpose() / denom;
        let (vals, vecs) = sorted_eigen(gram);
        let top = vals[0].max(0.0);
        if vals[target - 1] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
            return Err(GazeError::Numerical(format!(
                "data rank is below the PCA target {target} (eigenvalue {} vs leading {top})",
                vals[target - 1]
            )));
        }
        let mut basis = xc.tr_mul(&vecs.columns(0, target));
        for (j, mut col) in basis.column_iter_mut().enumerate() {
            col.unscale_mut((denom * vals[j]).sqrt());
        }
        orthonormalize(&mut basis)?;
        (vals[..target].to_vec(), basis)
    };
    fix_signs(&mut basis);
    Ok(Pca {
        mean,
        basis,
        eigenvalues: eigenvalues.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

/// Within- and between-class scatter of the rows of `z`.
pub fn scatter(z: &DMatrix<f64>, labels: &[usize], class_count: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = z.shape();
    if labels.len() != n {
        return Err(GazeError::DimensionMismatch { expected: n, got: labels.len() });
    }
    let mut sums = DMatrix::<f64>::zeros(class_count, p);
    let mut counts = vec![0usize; class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(GazeError::domain(format!("label {l} outside 0..{class_count}")));
        }
        counts[l] += 1;
        let mut row = sums.row_mut(l);
        row += z.row(i);
    }
    let mean = DVector::from_iterator(p, z.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = z.clone();
    let mut between = DMatrix::<f64>::zeros(p, p);
    for c in 0..class_count {
        if counts[c] == 0 {
            continue;
        }
        let mu = sums.row(c).transpose() / counts[c] as f64;
        let diff = &mu - &mean;
        between.ger(counts[c] as f64, &diff, &diff, 1.0);
        for (i, &l) in labels.iter().enumerate() {
            if l == c {
                let mut row = centered.row_mut(i);
                row -= mu.transpose();
            }
        }
    }
    let within = centered.tr_mul(&centered);
    Ok((within, between))
}

/// Discriminant directions maximizing between- over within-class scatter.
pub fn fit_lda(z: &DMatrix<f64>, labels: &[usize], class_count: usize) -> Result<Lda> {
    let (n, p) = z.shape();
    if class_count < 2 {
        return Err(GazeError::domain("LDA needs at least 2 classes"));
    }
    let out = class_count - 1;
    if p < out {
        return Err(GazeError::domain(format!("LDA input dimension {p} is below the output dimension {out}")));
    }
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l < class_count {
            counts[l] += 1;
        }
    }
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(GazeError::domain(format!("class {c} has {} sample(s); LDA needs 2", counts[c])));
    }
    if p + class_count > n {
        log::warn!("LDA input dimension {p} exceeds n - c = {}; within-class scatter is singular before the ridge", n - class_count);
    }
    let (mut within, between) = scatter(z, labels, class_count)?;
    let trace = within.trace();
    let eps = LDA_RIDGE * trace / p as f64;
    for i in 0..p {
        within[(i, i)] += eps;
    }
    let chol = within.clone().cholesky().ok_or_else(|| {
        GazeError::Numerical(format!(
            "within-class scatter not positive definite (trace {trace:e}, ridge {eps:e}, min diagonal {:e})",
            within.diagonal().min()
        ))
    })?;
    let l = chol.l();
    // M = L^-1 S_B L^-T
    let left = l.solve_lower_triangular(&between).ok_or_else(|| GazeError::Numerical("singular Cholesky factor".into()))?;
    let m = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| GazeError::Numerical("singular Cholesky factor".into()))?;
    let m = (&m + m.transpose()) * 0.5;
    let (vals, vecs) = sorted_eigen(m);
    let top = vecs.columns(0, out).into_owned();
    let mut basis = l
        .transpose()
        .solve_upper_triangular(&top)
        .ok_or_else(|| GazeError::Numerical("singular Cholesky factor".into()))?;
    fix_signs(&mut basis);
    Ok(Lda {
        basis,
        eigenvalues: vals[..out].to_vec(),
    })
}

/// `tr((W^T S_W W)^-1 W^T S_B W)` on the given data.
pub fn trace_fisher_ratio(z: &DMatrix<f64>, labels: &[usize], class_count: usize, w: &DMatrix<f64>) -> Result<f64> {
    let (within, between) = scatter(z, labels, class_count)?;
    let sw = w.tr_mul(&within) * w;
    let sb = w.tr_mul(&between) * w;
    let inv = sw
        .cholesky()
        .ok_or_else(|| GazeError::Numerical("projected within-class scatter is singular".into()))?
        .inverse();
    Ok((inv * sb).trace())
}

/// PCA dimension used before LDA.
pub fn pca_target(dim: usize, n_total: usize, class_count: usize, n_per_class_min: usize) -> usize {
    dim.min(n_total.saturating_sub(class_count)).min(n_per_class_min.max(PCA_FLOOR))
}

impl ReductionModel {
    pub fn from_parts(pca_mean: DVector<f64>, pca_basis: DMatrix<f64>, lda_basis: DMatrix<f64>, class_count: usize) -> Result<Self> {
        if pca_basis.nrows() != pca_mean.len() || lda_basis.nrows() != pca_basis.ncols() || lda_basis.ncols() + 1 != class_count {
            return Err(GazeError::Format("inconsistent reduction model shapes".into()));
        }
        let composed = &pca_basis * &lda_basis;
        Ok(Self {
            input_dim: pca_mean.len(),
            pca_mean,
            pca_basis,
            lda_basis,
            class_count,
            composed,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.class_count - 1
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(GazeError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim()];
        for (k, col) in self.composed.column_iter().enumerate() {
            out[k] = col.iter().zip(x).zip(self.pca_mean.iter()).map(|((w, v), m)| w * (v - m)).sum();
        }
        Ok(out)
    }
}

/// Rows as a `samples x dim` matrix.
pub fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(GazeError::DimensionMismatch { expected: d, got: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Fits PCA (to [`pca_target`] dimensions) then LDA on `class_count` classes.
pub fn fit_reduction(x: &DMatrix<f64>, labels: &[usize], class_count: usize) -> Result<ReductionModel> {
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(GazeError::DimensionMismatch { expected: n, got: labels.len() });
    }
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(GazeError::domain(format!("label {l} outside 0..{class_count}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(GazeError::domain(format!("class {c} has no training samples")));
    }
    let min_count = *counts.iter().min().expect("class_count > 0");
    let target = pca_target(d, n, class_count, min_count);
    if target + 1 < class_count {
        return Err(GazeError::domain(format!(
            "{n} samples of dimension {d} leave only {target} PCA dimensions for {class_count} classes"
        )));
    }
    let pca = fit_pca(x, target)?;
    let (_, xc) = center(x);
    let z = xc * &pca.basis;
    let lda = fit_lda(&z, labels, class_count)?;
    ReductionModel::from_parts(pca.mean, pca.basis, lda.basis, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    fn orthonormality_error(b: &DMatrix<f64>) -> f64 {
        let g = b.tr_mul(b) - DMatrix::identity(b.ncols(), b.ncols());
        g.amax()
    }

    #[test]
    fn line_data_has_one_component() {
        let dir = [1.0, -2.0, 0.5];
        let x = DMatrix::from_fn(40, 3, |i, j| i as f64 * 0.3 * dir[j] + 1.0);
        let pca = fit_pca(&x, 1).unwrap();
        let full = fit_pca(&x, 3).unwrap();
        let total: f64 = full.eigenvalues.iter().sum();
        assert!((pca.eigenvalues[0] / total - 1.0).abs() < 1e-12);
        let v = pca.basis.column(0);
        let norm = (1.0f64 + 4.0 + 0.25).sqrt();
        // sign convention: largest-magnitude entry (-2) positive
        assert!((v[1] - 2.0 / norm).abs() < 1e-9);
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = gaussian(60, 5, 2);
        let pca = fit_pca(&x, 5).unwrap();
        let (_, xc) = center(&x);
        let rec = &xc * &pca.basis * pca.basis.transpose();
        assert!((rec - xc).amax() < 1e-10);
        assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(fit_pca(&x, 6).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }

    #[test]
    fn discarded_energy_equals_dropped_eigenvalues() {
        // oracle: eigenvalues of the full covariance computed independently
        let x = gaussian(50, 20, 3);
        let (_, xc) = center(&x);
        let cov = xc.tr_mul(&xc) / 49.0;
        let mut all: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let target = 7;
        let pca = fit_pca(&x, target).unwrap();
        let rec = &xc * &pca.basis * pca.basis.transpose();
        let err = (&xc - rec).norm_squared() / 49.0;
        let dropped: f64 = all[target..].iter().sum();
        assert!((err - dropped).abs() < 1e-6, "{err} vs {dropped}");
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // more dimensions than samples exercises the Gram path
        let x = gaussian(30, 80, 4);
        let pca = fit_pca(&x, 10).unwrap();
        assert!(orthonormality_error(&pca.basis) <= 1e-8);
        let xt = x.columns(0, 80).into_owned();
        let (_, xc) = center(&xt);
        let cov = xc.tr_mul(&xc) / 29.0;
        let (vals, vecs) = sorted_eigen(cov);
        for j in 0..10 {
            assert!((vals[j] - pca.eigenvalues[j]).abs() < 1e-8 * vals[0]);
            let dot = vecs.column(j).dot(&pca.basis.column(j)).abs();
            assert!((dot - 1.0).abs() < 1e-6);
        }
    }

    fn two_blobs(seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| {
            let noise: f64 = rng.sample(StandardNormal);
            // elongated clusters separated along a diagonal
            let shift = if labels[i] == 1 { [3.0, 1.0][j] } else { 0.0 };
            shift + noise * [2.0, 0.4][j]
        });
        (x, labels)
    }

    #[test]
    fn lda_beats_random_directions() {
        let (x, labels) = two_blobs(5);
        let lda = fit_lda(&x, &labels, 2).unwrap();
        assert_eq!(lda.basis.shape(), (2, 1));
        let best = trace_fisher_ratio(&x, &labels, 2, &lda.basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let w = DMatrix::from_column_slice(2, 1, &[t.cos(), t.sin()]);
            assert!(trace_fisher_ratio(&x, &labels, 2, &w).unwrap() <= best * (1.0 + 1e-9));
        }
    }

    #[test]
    fn lda_rejects_thin_classes() {
        let (x, mut labels) = two_blobs(7);
        labels[0] = 2;
        assert!(fit_lda(&x, &labels, 3).is_err());
    }

    fn clustered(classes: usize, per: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = DMatrix::from_fn(classes, d, |_, _| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..classes * per).map(|i| i / per).collect();
        let x = DMatrix::from_fn(classes * per, d, |i, j| centers[(labels[i], j)] + rng.sample::<f64, _>(StandardNormal));
        (x, labels)
    }

    #[test]
    fn reduction_output_is_class_count_minus_one() {
        let (x, labels) = clustered(35, 8, 60, 8);
        let m = fit_reduction(&x, &labels, 35).unwrap();
        assert_eq!(m.output_dim(), 34);
        assert!(orthonormality_error(&m.pca_basis) <= 1e-8);
        let p = m.project(&x.row(0).iter().copied().collect::<Vec<_>>()).unwrap();
        assert_eq!(p.len(), 34);
        // the mean maps to the origin
        let at_mean = m.project(m.pca_mean.as_slice()).unwrap();
        assert!(at_mean.iter().all(|v| v.abs() < 1e-12));
        assert!(m.project(&[0.0; 3]).is_err());
    }

    #[test]
    fn projected_class_means_are_distinct() {
        let (x, labels) = clustered(35, 6, 40, 9);
        let m = fit_reduction(&x, &labels, 35).unwrap();
        let mut means = vec![vec![0.0; 34]; 35];
        for (i, &l) in labels.iter().enumerate() {
            let p = m.project(&x.row(i).iter().copied().collect::<Vec<_>>()).unwrap();
            for k in 0..34 {
                means[l][k] += p[k] / 6.0;
            }
        }
        let mut min = f64::INFINITY;
        for a in 0..35 {
            for b in a + 1..35 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn duplicated_column_leaves_projection_unchanged_on_data() {
        let (x, labels) = clustered(5, 12, 6, 10);
        let dup = DMatrix::from_fn(x.nrows(), 7, |i, j| x[(i, j.min(5))]);
        let a = fit_reduction(&x, &labels, 5).unwrap();
        let b = fit_reduction(&dup, &labels, 5).unwrap();
        // same discriminant subspace: Fisher ratios agree
        let pa: Vec<Vec<f64>> = (0..x.nrows()).map(|i| a.project(&x.row(i).iter().copied().collect::<Vec<_>>()).unwrap()).collect();
        let pb: Vec<Vec<f64>> = (0..x.nrows()).map(|i| b.project(&dup.row(i).iter().copied().collect::<Vec<_>>()).unwrap()).collect();
        let (za, zb) = (to_matrix(&pa).unwrap(), to_matrix(&pb).unwrap());
        let id = DMatrix::identity(4, 4);
        let ra = trace_fisher_ratio(&za, &labels, 5, &id).unwrap();
        let rb = trace_fisher_ratio(&zb, &labels, 5, &id).unwrap();
        assert!((ra - rb).abs() < 1e-6 * ra, "{ra} vs {rb}");
    }

    #[test]
    fn projection_is_affine() {
        let (x, labels) = clustered(6, 10, 12, 11);
        let m = fit_reduction(&x, &labels, 6).unwrap();
        let u: Vec<f64> = x.row(3).iter().copied().collect();
        let v: Vec<f64> = x.row(40).iter().copied().collect();
        let alpha = 0.3;
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let (pu, pv, pm) = (m.project(&u).unwrap(), m.project(&v).unwrap(), m.project(&mix).unwrap());
        for k in 0..5 {
            assert!((pm[k] - (alpha * pu[k] + (1.0 - alpha) * pv[k])).abs() < 1e-9);
        }
        assert_eq!(m.project(&u).unwrap(), pu);
    }

    #[test]
    fn fitting_is_deterministic() {
        let (x, labels) = clustered(35, 6, 50, 12);
        assert_eq!(fit_reduction(&x, &labels, 35).unwrap(), fit_reduction(&x, &labels, 35).unwrap());
    }

    #[test]
    fn empty_class_is_rejected() {
        let (x, mut labels) = clustered(4, 5, 6, 13);
        labels.iter_mut().for_each(|l| {
            if *l == 3 {
                *l = 2
            }
        });
        assert!(matches!(fit_reduction(&x, &labels, 4), Err(GazeError::Domain(_))));
    }

    #[test]
    fn pca_target_rule() {
        assert_eq!(pca_target(1440, 1225, 35, 35), 200);
        assert_eq!(pca_target(100, 1225, 35, 35), 100);
        assert_eq!(pca_target(6000, 140, 35, 4), 105);
        assert_eq!(pca_target(6000, 10_000, 35, 300), 300);
    }
}

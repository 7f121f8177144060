//! Linear discriminant analysis over latent vectors: scatter matrices, the
//! regularized generalized eigenproblem, projection, and nearest-mean
//! classification in the projected space.

use crate::linalg::{cholesky, jacobi_eigen, solve_lower, solve_lower_transpose, Mat};
use crate::AnalysisError;

#[derive(Debug, Clone)]
pub struct LdaModel {
    pub n_classes: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    pub priors: Vec<f64>,
    pub global_mean: Vec<f64>,
    pub within_scatter: Mat,
    pub between_scatter: Mat,
    pub epsilon: f64,
    /// Discriminant directions as columns, at most n_classes - 1 of them.
    pub basis: Mat,
    pub eigenvalues: Vec<f64>,
    projected_means: Vec<Vec<f64>>,
    /// Cholesky factor of the pooled covariance in projected space.
    pooled_chol: Mat,
}

fn check_inputs(xs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<usize, AnalysisError> {
    if xs.len() != labels.len() {
        return Err(AnalysisError::Invalid(format!(
            "{} samples but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    if xs.is_empty() {
        return Err(AnalysisError::Invalid("no samples".into()));
    }
    let dim = xs[0].len();
    if dim == 0 {
        return Err(AnalysisError::Invalid("zero-dimensional samples".into()));
    }
    for x in xs {
        if x.len() != dim {
            return Err(AnalysisError::Invalid("ragged sample dimensions".into()));
        }
    }
    for &l in labels {
        if l >= n_classes {
            return Err(AnalysisError::Invalid(format!(
                "label {l} outside class list of size {n_classes}"
            )));
        }
    }
    Ok(dim)
}

/// Fits the discriminant model. `epsilon` regularizes the within-class
/// scatter as S_w + epsilon * I; `None` picks 1e-6 * trace(S_w) / dim.
pub fn lda_fit(
    xs: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    epsilon: Option<f64>,
) -> Result<LdaModel, AnalysisError> {
    let dim = check_inputs(xs, labels, n_classes)?;
    if n_classes < 2 {
        return Err(AnalysisError::Invalid("need at least two classes".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(AnalysisError::Invalid(
            "need samples from at least two classes".into(),
        ));
    }
    for &c in &present {
        if counts[c] < 2 {
            return Err(AnalysisError::Invalid(format!(
                "class {c} has {} sample(s); need at least 2",
                counts[c]
            )));
        }
    }

    let n = xs.len();
    let mut class_means = vec![vec![0.0; dim]; n_classes];
    for (x, &l) in xs.iter().zip(labels) {
        for d in 0..dim {
            class_means[l][d] += x[d];
        }
    }
    for c in 0..n_classes {
        if counts[c] > 0 {
            for d in 0..dim {
                class_means[c][d] /= counts[c] as f64;
            }
        }
    }
    let mut global_mean = vec![0.0; dim];
    for x in xs {
        for d in 0..dim {
            global_mean[d] += x[d];
        }
    }
    for d in 0..dim {
        global_mean[d] /= n as f64;
    }

    let mut s_w = Mat::zeros(dim, dim);
    for (x, &l) in xs.iter().zip(labels) {
        let m = &class_means[l];
        for i in 0..dim {
            let di = x[i] - m[i];
            for j in 0..dim {
                s_w.data[i * dim + j] += di * (x[j] - m[j]);
            }
        }
    }
    let mut s_b = Mat::zeros(dim, dim);
    for c in 0..n_classes {
        if counts[c] == 0 {
            continue;
        }
        let w = counts[c] as f64;
        for i in 0..dim {
            let di = class_means[c][i] - global_mean[i];
            for j in 0..dim {
                s_b.data[i * dim + j] += w * di * (class_means[c][j] - global_mean[j]);
            }
        }
    }

    let trace: f64 = (0..dim).map(|i| s_w.at(i, i)).sum();
    let eps = epsilon.unwrap_or(1e-6 * trace / dim as f64);
    let mut a = s_w.clone();
    for i in 0..dim {
        a.data[i * dim + i] += eps;
    }
    let l = cholesky(&a).map_err(|_| {
        AnalysisError::Singular(
            "within-class scatter is singular; set a regularization epsilon > 0".into(),
        )
    })?;

    // M = L^-1 S_b L^-T, computed column-wise and symmetrized
    let mut m = Mat::zeros(dim, dim);
    let mut work = vec![0.0; dim];
    let mut b1 = Mat::zeros(dim, dim); // L^-1 S_b
    for c in 0..dim {
        for r in 0..dim {
            work[r] = s_b.at(r, c);
        }
        solve_lower(&l, &mut work);
        for r in 0..dim {
            *b1.at_mut(r, c) = work[r];
        }
    }
    for r in 0..dim {
        // row r of M = L^-1 (column r of B1^T) = solve on B1 row r
        for cdx in 0..dim {
            work[cdx] = b1.at(r, cdx);
        }
        solve_lower(&l, &mut work);
        for cdx in 0..dim {
            *m.at_mut(r, cdx) = work[cdx];
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let avg = 0.5 * (m.at(i, j) + m.at(j, i));
            *m.at_mut(i, j) = avg;
            *m.at_mut(j, i) = avg;
        }
    }

    let (eigs, vecs) = jacobi_eigen(&m)?;
    let k = (present.len() - 1).min(dim);
    let mut basis = Mat::zeros(dim, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for j in 0..k {
        let mut w = vecs.column(j);
        solve_lower_transpose(&l, &mut w);
        let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let pivot = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            let sign = if w[pivot] < 0.0 { -1.0 } else { 1.0 };
            for v in &mut w {
                *v = *v / norm * sign;
            }
        }
        for r in 0..dim {
            *basis.at_mut(r, j) = w[r];
        }
        eigenvalues.push(eigs[j]);
    }

    let project = |x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| (0..dim).map(|d| basis.at(d, j) * x[d]).sum())
            .collect()
    };
    let projected_means: Vec<Vec<f64>> = class_means.iter().map(|m| project(m)).collect();

    // pooled covariance of projected residuals
    let mut pooled = Mat::zeros(k, k);
    for (x, &lab) in xs.iter().zip(labels) {
        let px = project(x);
        let pm = &projected_means[lab];
        for i in 0..k {
            for j in 0..k {
                pooled.data[i * k + j] += (px[i] - pm[i]) * (px[j] - pm[j]);
            }
        }
    }
    let denom = (n.saturating_sub(present.len())).max(1) as f64;
    for v in &mut pooled.data {
        *v /= denom;
    }
    let ptrace: f64 = (0..k).map(|i| pooled.at(i, i)).sum();
    let ridge = (1e-9 * ptrace / k as f64).max(1e-300);
    let pooled_chol = loop {
        match cholesky(&pooled) {
            Ok(c) => break c,
            Err(_) => {
                for i in 0..k {
                    pooled.data[i * k + i] += ridge.max(1e-12);
                }
            }
        }
    };

    let priors = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(LdaModel {
        n_classes,
        dim,
        class_means,
        class_counts: counts,
        priors,
        global_mean,
        within_scatter: s_w,
        between_scatter: s_b,
        epsilon: eps,
        basis,
        eigenvalues,
        projected_means,
        pooled_chol,
    })
}

impl LdaModel {
    pub fn projection_dims(&self) -> usize {
        self.basis.cols
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        if x.len() != self.dim {
            return Err(AnalysisError::Invalid(format!(
                "sample dimension {} does not match model dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok((0..self.basis.cols)
            .map(|j| (0..self.dim).map(|d| self.basis.at(d, j) * x[d]).sum())
            .collect())
    }

    /// Squared Mahalanobis distance in projected space.
    fn distance2(&self, projected: &[f64], class: usize) -> f64 {
        let k = self.basis.cols;
        let mut diff: Vec<f64> = (0..k)
            .map(|i| projected[i] - self.projected_means[class][i])
            .collect();
        solve_lower(&self.pooled_chol, &mut diff);
        diff.iter().map(|v| v * v).sum()
    }

    /// Nearest projected class mean under the pooled Mahalanobis metric;
    /// ties break toward the lower class index. Classes absent from the
    /// training data never win.
    pub fn classify(&self, x: &[f64]) -> Result<usize, AnalysisError> {
        let projected = self.project(x)?;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for c in 0..self.n_classes {
            if self.class_counts[c] == 0 {
                continue;
            }
            let d = self.distance2(&projected, c);
            if d < best_d {
                best_d = d;
                best = Some(c);
            }
        }
        best.ok_or_else(|| AnalysisError::Invalid("no trained classes".into()))
    }

    /// Max over basis columns of || S_b w - lambda (S_w + eps I) w ||_2.
    pub fn generalized_eigen_residual(&self) -> f64 {
        let dim = self.dim;
        let mut worst = 0.0f64;
        for j in 0..self.basis.cols {
            let w = self.basis.column(j);
            let lam = self.eigenvalues[j];
            let sbw = self.between_scatter.matvec(&w);
            let mut sww = self.within_scatter.matvec(&w);
            for d in 0..dim {
                sww[d] += self.epsilon * w[d];
            }
            let mut res = 0.0;
            for d in 0..dim {
                res += (sbw[d] - lam * sww[d]).powi(2);
            }
            worst = worst.max(res.sqrt());
        }
        worst
    }
}

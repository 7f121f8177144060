//! Small dense f64 toolkit: row-major matrices, Cholesky factorization, and a
//! cyclic Jacobi eigensolver for symmetric matrices.

use crate::AnalysisError;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += self.at(r, c) * x[c];
            }
            out[r] = acc;
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lower-triangular L with A = L L^T. Fails on non-positive pivots.
pub fn cholesky(a: &Mat) -> Result<Mat, AnalysisError> {
    let n = a.rows;
    debug_assert_eq!(a.rows, a.cols);
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(AnalysisError::Singular(format!(
                        "non-positive pivot {acc:.3e} at row {i}"
                    )));
                }
                *l.at_mut(i, j) = acc.sqrt();
            } else {
                *l.at_mut(i, j) = acc / l.at(j, j);
            }
        }
    }
    Ok(l)
}

/// Solves L y = b in place (forward substitution).
pub fn solve_lower(l: &Mat, b: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.at(i, k) * b[k];
        }
        b[i] = acc / l.at(i, i);
    }
}

/// Solves L^T x = b in place (back substitution).
pub fn solve_lower_transpose(l: &Mat, b: &mut [f64]) {
    let n = l.rows;
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in i + 1..n {
            acc -= l.at(k, i) * b[k];
        }
        b[i] = acc / l.at(i, i);
    }
}

/// Cyclic Jacobi for symmetric matrices: returns eigenvalues (descending) and
/// the matching eigenvector columns.
pub fn jacobi_eigen(a: &Mat) -> Result<(Vec<f64>, Mat), AnalysisError> {
    let n = a.rows;
    debug_assert_eq!(a.rows, a.cols);
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = a.frobenius().max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m.at(p, q).abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigs: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&a_i, &b_i| eigs[b_i].partial_cmp(&eigs[a_i]).unwrap().then(a_i.cmp(&b_i)));
    let mut values = Vec::with_capacity(n);
    let mut vectors = Mat::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        values.push(eigs[old_c]);
        for r in 0..n {
            *vectors.at_mut(r, new_c) = v.at(r, old_c);
        }
    }
    Ok((values, vectors))
}

//! One-sided Jacobi SVD.
//!
//! Hestenes' variant: plane rotations orthogonalize pairs of columns of the
//! working matrix while the same rotations accumulate into `V`. At
//! convergence the column norms are the singular values and the normalized
//! columns are `U`. Accuracy is ample for desk-scale matrices (<= 512).

use crate::error::{Error, Result};

use super::matrix::Matrix;

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Thin SVD `a = U diag(s) V^T` with `U, V` column-orthonormal and `s`
/// non-negative, sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Reconstruct `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u.at(i, j) * self.s[j]);
        us.matmul(&self.v.transpose())
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Contract("svd of an empty matrix".into()));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        // Work on the transpose and swap the factors back.
        let t = svd_tall(&a.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Column-major copies make the rotations contiguous.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if gamma.abs() <= OFF_DIAG_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd did not converge after {MAX_SWEEPS} sweeps"
        )));
    }

    let mut s: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap().then(i.cmp(&j)));
    let w: Vec<Vec<f64>> = order.iter().map(|&j| w[j].clone()).collect();
    let vcols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    s = order.iter().map(|&j| s[j]).collect();

    // Normalize columns into U; columns whose singular value underflows get a
    // fresh direction orthogonal to everything already placed.
    let scale = s.first().copied().unwrap_or(0.0).max(1.0);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, col) in w.iter().enumerate() {
        if s[j] > scale * 1e-300 && s[j] > 0.0 {
            ucols.push(col.iter().map(|x| x / s[j]).collect());
        } else {
            ucols.push(complete_direction(m, &ucols));
        }
    }

    let mut u = Matrix::from_fn(m, n, |i, j| ucols[j][i]);
    let mut vm = Matrix::from_fn(n, n, |i, j| vcols[j][i]);
    fix_signs(&mut u, &mut vm);
    Ok(Svd { u, s, v: vm })
}

/// Unit vector orthogonal to the given columns (modified Gram-Schmidt over
/// the standard basis).
fn complete_direction(m: usize, existing: &[Vec<f64>]) -> Vec<f64> {
    for seed in 0..m {
        let mut cand = vec![0.0; m];
        cand[seed] = 1.0;
        for col in existing {
            let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
            for (c, e) in cand.iter_mut().zip(col) {
                *c -= dot * e;
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            return cand;
        }
    }
    // Unreachable for m >= number of columns.
    let mut fallback = vec![0.0; m];
    fallback[0] = 1.0;
    fallback
}

/// Deterministic sign convention: the largest-magnitude entry of each `U`
/// column is made positive, with `V` flipped to compensate.
fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..u.rows() {
            let a = u.at(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.at(best, j) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, j, -u.at(i, j));
            }
            for i in 0..v.rows() {
                v.set(i, j, -v.at(i, j));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn orthonormality_defect(m: &Matrix) -> f64 {
        let gram = m.transpose().matmul(m).unwrap();
        gram.sub(&Matrix::identity(gram.rows()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let d = svd(&Matrix::identity(3)).unwrap();
        for s in d.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_spectrum_sorted() {
        let d = svd(&Matrix::diag(&[2.0, 3.0, 1.0])).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-12);
        assert!((d.s[1] - 2.0).abs() < 1e-12);
        assert!((d.s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rect_reconstructs_both_orientations() {
        for (rows, cols, seed) in [(5, 3, 0u64), (3, 5, 1), (8, 8, 2), (12, 7, 3)] {
            let a = Rng::new(100 + seed).normal_matrix(rows, cols, 1.0);
            let d = svd(&a).unwrap();
            let resid = d.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
            assert!(
                resid <= 1e-9 * a.frobenius_norm().max(1.0),
                "residual {resid} for {rows}x{cols}"
            );
            assert!(orthonormality_defect(&d.u) < 1e-9);
            assert!(orthonormality_defect(&d.v) < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        // Rank-1 4x3 matrix.
        let u = Matrix::col_vec(&[1.0, 2.0, -1.0, 0.5]);
        let v = Matrix::from_vec(1, 3, vec![2.0, 0.0, -1.0]).unwrap();
        let a = u.matmul(&v).unwrap();
        let d = svd(&a).unwrap();
        assert!(orthonormality_defect(&d.u) < 1e-9);
        assert!(orthonormality_defect(&d.v) < 1e-9);
        assert!(d.s[1].abs() < 1e-9 && d.s[2].abs() < 1e-9);
        let resid = d.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn zero_matrix_gets_orthonormal_basis() {
        let d = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(d.s.iter().all(|&s| s == 0.0));
        assert!(orthonormality_defect(&d.u) < 1e-12);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let a = Rng::new(5).normal_matrix(6, 4, 1.0);
        let d = svd(&a).unwrap();
        for j in 0..d.u.cols() {
            let col = d.u.col(j);
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            let min = col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max >= min.abs() - 1e-12, "column {j} dominant entry not positive");
        }
    }
}

//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Each sweep visits every off-diagonal pair once and applies the plane
//! rotation that annihilates it. Rotations are accumulated into the
//! eigenvector matrix. Iteration stops once the off-diagonal Frobenius norm
//! falls below `1e-12 · ‖A‖_F`.

use nalgebra::{DMatrix, DVector};

use super::cov::CovMatrix;
use crate::error::{Error, Result};

const CONVERGENCE_REL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted descending.
    pub eigenvalues: DVector<f64>,
    /// Column `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    /// `X Λ Xᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let x = &self.eigenvectors;
        x * DMatrix::from_diagonal(&self.eigenvalues) * x.transpose()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

pub fn eig_symmetric(m: &CovMatrix) -> Result<EigenDecomposition> {
    jacobi_eigen(&m.to_full())
}

/// Eigendecomposition of a symmetric dense matrix. Only the upper triangle is read.
pub fn jacobi_eigen(input: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = input.nrows();
    if n == 0 || n != input.ncols() {
        return Err(Error::invalid(format!(
            "eigendecomposition needs a non-empty square matrix, got {}x{}",
            input.nrows(),
            input.ncols()
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "eigendecomposition input has non-finite entries",
        ));
    }

    let mut a = DMatrix::from_fn(
        n,
        n,
        |i, j| if i <= j { input[(i, j)] } else { input[(j, i)] },
    );
    let mut v = DMatrix::<f64>::identity(n, n);
    let threshold = CONVERGENCE_REL * a.norm();

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                // theta.signum() is +1 for theta == 0, which gives t = 1 (45° rotation).
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// Applies `A ← Jᵀ A J`, `V ← V J` for the rotation in the (p, q) plane.
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

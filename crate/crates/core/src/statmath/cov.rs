use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::eigen::eig_symmetric;
use crate::error::{Error, Result};

/// Relative tolerance on negative eigenvalues for the PSD check.
pub const PSD_REL_TOL: f64 = 1e-9;
/// Absolute eigenvalue floor below which a covariance is treated as singular.
pub const PD_ABS_TOL: f64 = 1e-12;

/// Number of entries in the packed upper triangle of an `n x n` matrix.
pub const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Recover `n` from a packed length, if it is triangular.
pub fn dim_from_packed_len(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (packed_len(n) == len).then_some(n)
}

/// Symmetric matrix stored as its upper triangle, row-major.
///
/// Symmetry holds by construction. Positive semidefiniteness is checked by
/// [`CovMatrix::check_psd`]; constructors accept any finite symmetric input so
/// intermediate quantities (e.g. fit residuals) can share the type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl CovMatrix {
    pub fn from_upper(dim: usize, upper: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("covariance dimension must be positive"));
        }
        if upper.len() != packed_len(dim) {
            return Err(Error::invalid(format!(
                "packed covariance of dim {dim} needs {} entries, got {}",
                packed_len(dim),
                upper.len()
            )));
        }
        Ok(Self { dim, upper })
    }

    /// Packs a square matrix, averaging the two triangles.
    pub fn from_full(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(Error::invalid(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut upper = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in i..n {
                upper.push(if i == j {
                    m[(i, i)]
                } else {
                    0.5 * (m[(i, j)] + m[(j, i)])
                });
            }
        }
        Self::from_upper(n, upper)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; packed_len(dim)],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut c = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            c.set(i, i, *d);
        }
        c
    }

    /// `v vᵀ`
    pub fn outer(v: &DVector<f64>) -> Self {
        let n = v.len();
        let mut upper = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in i..n {
                upper.push(v[i] * v[j]);
            }
        }
        Self { dim: n, upper }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    #[inline]
    pub fn upper_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    pub fn into_upper(self) -> Vec<f64> {
        self.upper
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.dim - i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let idx = self.index(i, j);
        self.upper[idx] = value;
    }

    pub fn to_full(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius norm of the full symmetric matrix.
    pub fn frobenius_norm(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.get(i, j);
                sum += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        sum.sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            upper: self.upper.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &CovMatrix, s: f64) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.upper.iter().all(|v| v.is_finite())
    }

    /// Checks the PSD invariant: every eigenvalue ≥ −1e-9·‖P‖_F.
    pub fn check_psd(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid("covariance has non-finite entries"));
        }
        let eig = eig_symmetric(self)?;
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min < -PSD_REL_TOL * self.frobenius_norm() {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min,
            });
        }
        Ok(())
    }

    pub fn is_psd(&self) -> bool {
        self.check_psd().is_ok()
    }

    /// `M P Mᵀ` for an arbitrary (possibly rectangular) `M`.
    pub fn congruence(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != self.dim {
            return Err(Error::invalid(format!(
                "congruence needs {} columns, got {}",
                self.dim,
                m.ncols()
            )));
        }
        Self::from_full(&(m * self.to_full() * m.transpose()))
    }
}

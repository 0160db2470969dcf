use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use super::chi2::chi2_quantile;
use super::cov::{CovMatrix, PD_ABS_TOL};
use super::eigen::eig_symmetric;
use crate::error::{Error, Result};

/// Normalized estimation error squared values for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeesSeries {
    values: Vec<f64>,
    dof: u32,
}

impl NeesSeries {
    pub fn new(values: Vec<f64>, dof: u32) -> Result<Self> {
        if dof == 0 {
            return Err(Error::invalid("NEES degrees of freedom must be >= 1"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "NEES values must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self { values, dof })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Concatenates several series of equal dof.
    pub fn pooled(series: &[NeesSeries]) -> Result<Self> {
        let first = series
            .first()
            .ok_or(Error::EmptyInput("no NEES series to pool"))?;
        if series.iter().any(|s| s.dof != first.dof) {
            return Err(Error::invalid("pooled NEES series have different dof"));
        }
        let values = series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect();
        Ok(Self {
            values,
            dof: first.dof,
        })
    }
}

fn check_dims(e: &DVector<f64>, p: &CovMatrix) -> Result<()> {
    if e.len() != p.dim() {
        return Err(Error::invalid(format!(
            "error vector has length {} but covariance is {}x{}",
            e.len(),
            p.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// `eᵀ P⁻¹ e` through a Cholesky solve.
pub fn nees(e: &DVector<f64>, p: &CovMatrix) -> Result<f64> {
    cholesky_nees(e, p, PD_ABS_TOL)
}

fn cholesky_nees(e: &DVector<f64>, p: &CovMatrix, pivot_tol: f64) -> Result<f64> {
    check_dims(e, p)?;
    if !p.is_finite() || e.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("NEES input has non-finite entries"));
    }
    let full = p.to_full();
    let chol = Cholesky::new(full).ok_or_else(|| Error::SingularCovariance {
        min_eigenvalue: eig_symmetric(p)
            .map(|d| d.min_eigenvalue())
            .unwrap_or(f64::NAN),
    })?;
    let l = chol.l();
    if (0..l.nrows()).any(|i| l[(i, i)] * l[(i, i)] <= pivot_tol) {
        return Err(Error::SingularCovariance {
            min_eigenvalue: eig_symmetric(p)
                .map(|d| d.min_eigenvalue())
                .unwrap_or(f64::NAN),
        });
    }
    // ‖L⁻¹ e‖²
    let w = l.solve_lower_triangular(e).expect("nonzero diagonal");
    Ok(w.norm_squared())
}

/// NEES for batch evaluation: near-singular covariances are regularized with
/// `ε I`, `ε = 1e-12 · trace / n`, and a warning is logged instead of failing.
/// The regularized matrix only needs positive Cholesky pivots; one that is
/// still not positive definite is an error.
pub fn nees_regularized(e: &DVector<f64>, p: &CovMatrix) -> Result<f64> {
    match nees(e, p) {
        Err(Error::SingularCovariance { min_eigenvalue }) => {
            let n = p.dim() as f64;
            let eps = 1e-12 * p.trace().abs() / n;
            if eps <= 0.0 {
                return Err(Error::SingularCovariance { min_eigenvalue });
            }
            log::warn!(
                "regularizing near-singular covariance (min eigenvalue {min_eigenvalue:e}) with {eps:e}"
            );
            let mut reg = p.clone();
            for i in 0..p.dim() {
                reg.set(i, i, reg.get(i, i) + eps);
            }
            cholesky_nees(e, &reg, 0.0)
        }
        other => other,
    }
}

/// Coordinates of `v − u` in the basis `X Λ^{1/2}` of `sigma = X Λ Xᵀ`.
pub fn sigma_coordinates(
    v: &DVector<f64>,
    u: &DVector<f64>,
    sigma: &CovMatrix,
) -> Result<DVector<f64>> {
    if v.len() != u.len() {
        return Err(Error::invalid("sample and mean have different lengths"));
    }
    let d = v - u;
    check_dims(&d, sigma)?;
    let eig = eig_symmetric(sigma)?;
    if eig.min_eigenvalue() <= PD_ABS_TOL {
        return Err(Error::SingularCovariance {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    let mut nu = eig.eigenvectors.transpose() * d;
    for (i, x) in nu.iter_mut().enumerate() {
        *x /= eig.eigenvalues[i].sqrt();
    }
    Ok(nu)
}

/// Percentages of whitened coordinates within ±1, ±2, ±3 per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaIntervalCounts {
    pub per_dim: Vec<[f64; 3]>,
    pub sample_count: usize,
}

impl SigmaIntervalCounts {
    pub fn dim(&self) -> usize {
        self.per_dim.len()
    }
}

pub fn count_sigma_intervals(nus: &[DVector<f64>]) -> Result<SigmaIntervalCounts> {
    let first = nus
        .first()
        .ok_or(Error::EmptyInput("no sigma coordinates to count"))?;
    let n = first.len();
    let mut counts = vec![[0usize; 3]; n];
    for nu in nus {
        if nu.len() != n {
            return Err(Error::invalid(
                "sigma coordinate vectors differ in dimension",
            ));
        }
        for (d, x) in nu.iter().enumerate() {
            let a = x.abs();
            for (s, c) in counts[d].iter_mut().enumerate() {
                if a <= (s + 1) as f64 {
                    *c += 1;
                }
            }
        }
    }
    let total = nus.len() as f64;
    let per_dim = counts
        .into_iter()
        .map(|c| [0, 1, 2].map(|s| 100.0 * c[s] as f64 / total))
        .collect();
    Ok(SigmaIntervalCounts {
        per_dim,
        sample_count: nus.len(),
    })
}

/// One timestep of the Monte-Carlo NEES test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNeesStep {
    pub sum: f64,
    pub lower: f64,
    pub upper: f64,
    pub in_interval: bool,
}

/// Sums NEES across `M` runs per timestep and checks it against the two-sided
/// χ²_{M·n} interval at the given confidence.
pub fn mc_nees_test(per_run: &[NeesSeries], confidence: f64) -> Result<Vec<McNeesStep>> {
    let first = per_run
        .first()
        .ok_or(Error::EmptyInput("no Monte-Carlo runs"))?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!(
            "confidence must be in (0, 1), got {confidence}"
        )));
    }
    if per_run
        .iter()
        .any(|r| r.len() != first.len() || r.dof() != first.dof())
    {
        return Err(Error::invalid("Monte-Carlo runs differ in length or dof"));
    }
    let dof = first.dof() * per_run.len() as u32;
    let lower = chi2_quantile((1.0 - confidence) / 2.0, dof)?;
    let upper = chi2_quantile((1.0 + confidence) / 2.0, dof)?;
    Ok((0..first.len())
        .map(|k| {
            let sum: f64 = per_run.iter().map(|r| r.values[k]).sum();
            McNeesStep {
                sum,
                lower,
                upper,
                in_interval: sum >= lower && sum <= upper,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Matrix2, Vector2};
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn nees_examples() {
        assert_eq!(
            nees(&dv(&[1.0, 0.0]), &CovMatrix::identity(2)).unwrap(),
            1.0
        );
        assert_eq!(
            nees(&dv(&[0.0, 0.0]), &CovMatrix::identity(2)).unwrap(),
            0.0
        );
        let p = CovMatrix::from_diagonal(&[1.0, 4.0]);
        assert!((nees(&dv(&[1.0, 2.0]), &p).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nees_singular() {
        let p = CovMatrix::from_diagonal(&[1.0, 0.0]);
        assert!(matches!(
            nees(&dv(&[1.0, 1.0]), &p),
            Err(Error::SingularCovariance { .. })
        ));
        let z = CovMatrix::zeros(2);
        assert!(matches!(
            nees_regularized(&dv(&[1.0, 1.0]), &z),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn nees_regularized_rescues_rank_deficient() {
        // rank one, trace 2: regularized NEES is finite
        let p = CovMatrix::from_upper(2, vec![1.0, 1.0, 1.0]).unwrap();
        let v = nees_regularized(&dv(&[1.0, 1.0]), &p).unwrap();
        assert!(v.is_finite() && (v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigma_coordinates_examples() {
        let nu = sigma_coordinates(
            &dv(&[2.0, 3.0]),
            &dv(&[0.0, 0.0]),
            &CovMatrix::from_diagonal(&[4.0, 9.0]),
        )
        .unwrap();
        // eigen order is descending, so the dimension-2 axis comes first
        let mut a: Vec<f64> = nu.iter().map(|x| x.abs()).collect();
        a.sort_by(f64::total_cmp);
        assert!((a[0] - 1.0).abs() < 1e-15 && (a[1] - 1.0).abs() < 1e-15);

        let u = dv(&[0.3, -0.2]);
        let nu = sigma_coordinates(
            &u,
            &u,
            &CovMatrix::from_upper(2, vec![2.0, 1.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(nu.norm(), 0.0);
    }

    #[test]
    fn sigma_coordinates_vs_explicit_inverse() {
        // [[2,1],[1,2]]⁻¹ = [[2,-1],[-1,2]] / 3
        let sigma = CovMatrix::from_upper(2, vec![2.0, 1.0, 2.0]).unwrap();
        let d = Vector2::new(1.0, 1.0);
        let inv = Matrix2::new(2.0, -1.0, -1.0, 2.0) / 3.0;
        let quad = (d.transpose() * inv * d)[(0, 0)];
        let nu = sigma_coordinates(&dv(&[1.0, 1.0]), &dv(&[0.0, 0.0]), &sigma).unwrap();
        assert!((nu.norm_squared() - quad).abs() < 1e-12);
        // eigen route: eigenvalue 3 along (1,1)/√2 gives ν = ±√(2/3), 0
        assert!((nu[0].abs() - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(nu[1].abs() < 1e-12);
    }

    #[test]
    fn sigma_coordinates_singular() {
        let sigma = CovMatrix::from_diagonal(&[1.0, 0.0]);
        assert!(matches!(
            sigma_coordinates(&dv(&[1.0, 0.0]), &dv(&[0.0, 0.0]), &sigma),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn counts_of_zeros() {
        let nus = vec![dv(&[0.0, 0.0]); 3];
        let c = count_sigma_intervals(&nus).unwrap();
        assert_eq!(c.per_dim, vec![[100.0; 3]; 2]);
        assert!(matches!(
            count_sigma_intervals(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn counts_boundaries_inclusive() {
        let nus = vec![dv(&[1.0]), dv(&[2.0]), dv(&[-3.0]), dv(&[3.5])];
        let c = count_sigma_intervals(&nus).unwrap();
        assert_eq!(c.per_dim[0], [25.0, 50.0, 75.0]);
    }

    #[test]
    fn mc_test_zero_nees_below_lower_bound() {
        let runs = vec![NeesSeries::new(vec![0.0; 10], 2).unwrap(); 5];
        let steps = mc_nees_test(&runs, 0.95).unwrap();
        assert!(steps.iter().all(|s| !s.in_interval && s.sum < s.lower));
        assert!(matches!(mc_nees_test(&[], 0.95), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn nees_series_validation() {
        assert!(NeesSeries::new(vec![1.0, -0.1], 2).is_err());
        assert!(NeesSeries::new(vec![1.0], 0).is_err());
        assert!(NeesSeries::new(vec![f64::NAN], 1).is_err());
    }

    fn pd_and_sample() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=8).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(-3.0f64..3.0, n),
            )
                .prop_map(move |(b, v, u)| {
                    let b = DMatrix::from_vec(n, n, b);
                    (&b * b.transpose() + DMatrix::identity(n, n) * 0.1, v, u)
                })
        })
    }

    proptest! {
        #[test]
        fn nees_equals_squared_sigma_coordinates((m, v, u) in pd_and_sample()) {
            let p = CovMatrix::from_full(&m).unwrap();
            let (v, u) = (dv(&v), dv(&u));
            let rho = nees(&(&v - &u), &p).unwrap();
            let nu = sigma_coordinates(&v, &u, &p).unwrap();
            prop_assert!((rho - nu.norm_squared()).abs() <= 1e-10 * rho.max(1.0));
        }
    }
}

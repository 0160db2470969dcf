//! Statistical and linear-algebra kernel: χ² functions, symmetric
//! eigendecomposition, NEES, σ-interval counts, empirical densities and the
//! L2 divergence test.

mod chi2;
mod cov;
mod density;
mod eigen;
mod nees;

pub use chi2::{
    chi2_cdf, chi2_pdf, chi2_quantile, ln_gamma, normal_two_sided_mass, regularized_lower_gamma,
    regularized_upper_gamma,
};
pub use cov::{dim_from_packed_len, packed_len, CovMatrix, PD_ABS_TOL, PSD_REL_TOL};
pub use density::{
    build_density, chi2_bin_average, chi2_squared_norm, discretized_chi2, l2_divergence,
    l2_divergence_detail, mean_std, nees_divergence, resampled_divergence, Binning,
    DivergenceDetail, EmpiricalDensity, ResampledDivergence,
};
pub use eigen::{eig_symmetric, jacobi_eigen, EigenDecomposition};
pub use nees::{
    count_sigma_intervals, mc_nees_test, nees, nees_regularized, sigma_coordinates, McNeesStep,
    NeesSeries, SigmaIntervalCounts,
};

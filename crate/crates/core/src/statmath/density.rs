//! Normalized histograms of NEES values and their L2 distance to the χ²ₙ density.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chi2::{chi2_cdf, chi2_quantile, ln_gamma, regularized_lower_gamma};
use super::nees::NeesSeries;
use crate::error::{Error, Result};

/// Upper quantile of χ²ₙ that the histogram support always reaches.
const SUPPORT_QUANTILE: f64 = 0.999;

/// How a histogram partitions `[0, max(sample max, χ²ₙ 0.999-quantile)]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum Binning {
    /// ⌈√N⌉ equal-width bins.
    #[default]
    SqrtN,
    /// A fixed number of equal-width bins.
    Count(usize),
    /// Equal-width bins of (at most) the given width.
    Width(f64),
}

impl Binning {
    fn bin_count(&self, samples: usize, upper: f64) -> usize {
        match *self {
            Binning::SqrtN => ((samples as f64).sqrt().ceil() as usize).max(1),
            Binning::Count(b) => b.max(1),
            Binning::Width(w) => ((upper / w).ceil() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDensity {
    pub bin_edges: Vec<f64>,
    pub bin_heights: Vec<f64>,
    pub sample_count: usize,
}

impl EmpiricalDensity {
    pub fn bin_count(&self) -> usize {
        self.bin_heights.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.bin_edges[i + 1] - self.bin_edges[i]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        (0..self.bin_count())
            .map(|i| self.bin_heights[i] * self.width(i))
            .sum()
    }
}

fn equal_width_edges(upper: f64, bins: usize) -> Vec<f64> {
    let w = upper / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| i as f64 * w).collect();
    edges.push(upper);
    edges
}

pub fn build_density(values: &NeesSeries, binning: Binning) -> Result<EmpiricalDensity> {
    if values.is_empty() {
        return Err(Error::EmptyInput("cannot build a density from no samples"));
    }
    if let Binning::Width(w) = binning {
        if !(w > 0.0) {
            return Err(Error::invalid("bin width must be positive"));
        }
    }
    let sample_max = values.values().iter().cloned().fold(0.0, f64::max);
    let upper = sample_max.max(chi2_quantile(SUPPORT_QUANTILE, values.dof())?);
    let bins = binning.bin_count(values.len(), upper);
    let edges = equal_width_edges(upper, bins);
    let mut counts = vec![0usize; bins];
    let scale = bins as f64 / upper;
    for &v in values.values() {
        let i = ((v * scale) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = values.len() as f64;
    let heights = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 / (n * (edges[i + 1] - edges[i])))
        .collect();
    Ok(EmpiricalDensity {
        bin_edges: edges,
        bin_heights: heights,
        sample_count: values.len(),
    })
}

/// Average of the χ²ₙ density over `[a, b]`.
pub fn chi2_bin_average(a: f64, b: f64, dof: u32) -> f64 {
    (chi2_cdf(b, dof) - chi2_cdf(a, dof)) / (b - a)
}

/// The χ²ₙ density discretized onto an existing bin grid.
pub fn discretized_chi2(edges: &[f64], dof: u32) -> EmpiricalDensity {
    let heights = edges
        .windows(2)
        .map(|w| chi2_bin_average(w[0], w[1], dof))
        .collect();
    EmpiricalDensity {
        bin_edges: edges.to_vec(),
        bin_heights: heights,
        sample_count: 0,
    }
}

/// `∫₀^∞ p_χ²ₙ(x)² dx = Γ(n−1) / (2ⁿ Γ(n/2)²)`, finite for `n ≥ 2`.
pub fn chi2_squared_norm(dof: u32) -> Result<f64> {
    if dof < 2 {
        return Err(Error::invalid("the χ²₁ density is not square integrable"));
    }
    let k = dof as f64;
    Ok((ln_gamma(k - 1.0) - k * std::f64::consts::LN_2 - 2.0 * ln_gamma(0.5 * k)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceDetail {
    pub divergence: f64,
    /// χ²ₙ probability mass beyond the last bin edge.
    pub chi2_tail_mass: f64,
    /// Part of `divergence²` contributed by `x` beyond the last bin edge.
    pub tail_contribution: f64,
}

/// `(∫₀^∞ (p_ρ − p_χ²ₙ)² dx)^{1/2}` for a piecewise-constant histogram `p_ρ`.
///
/// Expanding the square gives `Σ wᵢhᵢ² − 2 Σ hᵢ ΔFᵢ + ‖p_χ²ₙ‖²` with `ΔFᵢ` the
/// χ² mass of bin `i`, so the value is exact and includes the tail past the
/// grid. Requires `dof ≥ 2`.
pub fn l2_divergence(d: &EmpiricalDensity, dof: u32) -> Result<f64> {
    Ok(l2_divergence_detail(d, dof)?.divergence)
}

pub fn l2_divergence_detail(d: &EmpiricalDensity, dof: u32) -> Result<DivergenceDetail> {
    if d.bin_edges.len() != d.bin_heights.len() + 1 || d.bin_heights.is_empty() {
        return Err(Error::invalid("density needs B heights and B+1 edges"));
    }
    let norm2 = chi2_squared_norm(dof)?;
    let mut sum = norm2;
    let mut f_prev = chi2_cdf(d.bin_edges[0], dof);
    for i in 0..d.bin_count() {
        let f = chi2_cdf(d.bin_edges[i + 1], dof);
        let h = d.bin_heights[i];
        sum += d.width(i) * h * h - 2.0 * h * (f - f_prev);
        f_prev = f;
    }
    let last = *d.bin_edges.last().expect("nonempty");
    let k = dof as f64;
    let tail_contribution = norm2 * (1.0 - regularized_lower_gamma(k - 1.0, last));
    Ok(DivergenceDetail {
        divergence: sum.max(0.0).sqrt(),
        chi2_tail_mass: 1.0 - f_prev,
        tail_contribution,
    })
}

/// Histogram with the given binning, then its divergence to χ²ₙ.
pub fn nees_divergence(values: &NeesSeries, binning: Binning) -> Result<f64> {
    l2_divergence(&build_density(values, binning)?, values.dof())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampledDivergence {
    pub mean: f64,
    pub std: f64,
    pub groups: usize,
    pub group_size: usize,
}

/// Mean and sample standard deviation of divergences over `groups` random
/// subsets of `group_size` values, each drawn without replacement.
pub fn resampled_divergence(
    values: &NeesSeries,
    groups: usize,
    group_size: usize,
    binning: Binning,
    seed: u64,
) -> Result<ResampledDivergence> {
    if groups == 0 || group_size == 0 {
        return Err(Error::invalid(
            "resampling needs at least one group of one point",
        ));
    }
    if values.len() < group_size {
        return Err(Error::InsufficientData(format!(
            "{} NEES values cannot fill a group of {group_size}",
            values.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut divs = Vec::with_capacity(groups);
    for _ in 0..groups {
        let picked: Vec<f64> = index::sample(&mut rng, values.len(), group_size)
            .into_iter()
            .map(|i| values.values()[i])
            .collect();
        divs.push(nees_divergence(
            &NeesSeries::new(picked, values.dof())?,
            binning,
        )?);
    }
    let (mean, std) = mean_std(&divs);
    Ok(ResampledDivergence {
        mean,
        std,
        groups,
        group_size,
    })
}

/// Mean and sample (n − 1) standard deviation; std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statmath::chi2_pdf;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{ChiSquared, Distribution};

    fn chi2_samples(n: usize, dof: u32, seed: u64) -> NeesSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = ChiSquared::new(dof as f64).unwrap();
        NeesSeries::new((0..n).map(|_| dist.sample(&mut rng)).collect(), dof).unwrap()
    }

    #[test]
    fn single_bin_height_is_inverse_width() {
        let s = NeesSeries::new(vec![0.1, 0.2, 0.3], 2).unwrap();
        let d = build_density(&s, Binning::Count(1)).unwrap();
        assert_eq!(d.bin_count(), 1);
        assert!((d.bin_heights[0] - 1.0 / d.width(0)).abs() < 1e-15);
    }

    #[test]
    fn values_concentrated_in_one_bin() {
        let s = NeesSeries::new(vec![0.01; 50], 2).unwrap();
        let d = build_density(&s, Binning::SqrtN).unwrap();
        assert!((d.bin_heights[0] - 1.0 / d.width(0)).abs() < 1e-12);
        assert!(d.bin_heights[1..].iter().all(|h| *h == 0.0));
    }

    #[test]
    fn support_and_normalization() {
        let s = chi2_samples(1000, 3, 1);
        let d = build_density(&s, Binning::SqrtN).unwrap();
        assert_eq!(d.bin_count(), 32);
        assert_eq!(d.bin_edges[0], 0.0);
        let max = s.values().iter().cloned().fold(0.0, f64::max);
        let q = chi2_quantile(0.999, 3).unwrap();
        assert_eq!(*d.bin_edges.last().unwrap(), max.max(q));
        assert!(d.bin_edges.windows(2).all(|w| w[1] > w[0]));
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        let s = NeesSeries::new(vec![], 2).unwrap();
        assert!(matches!(
            build_density(&s, Binning::SqrtN),
            Err(Error::EmptyInput(_))
        ));
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn squared_norm_matches_quadrature() {
        for dof in [2u32, 3, 4, 9, 20] {
            let q = simpson(|x| chi2_pdf(x, dof).powi(2), 0.0, 200.0, 200_000);
            assert!(
                (chi2_squared_norm(dof).unwrap() - q).abs() < 1e-9,
                "dof {dof}"
            );
        }
        assert!((chi2_squared_norm(4).unwrap() - 0.125).abs() < 1e-15);
        assert!(chi2_squared_norm(1).is_err());
    }

    #[test]
    fn divergence_matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dof in [2u32, 4, 9] {
            let upper = rng.random_range(5.0..40.0);
            let edges = equal_width_edges(upper, 13);
            let heights: Vec<f64> = (0..13).map(|_| rng.random_range(0.0..0.2)).collect();
            let d = EmpiricalDensity {
                bin_edges: edges.clone(),
                bin_heights: heights.clone(),
                sample_count: 0,
            };
            let mut q = 0.0;
            for i in 0..13 {
                q += simpson(
                    |x| (heights[i] - chi2_pdf(x, dof)).powi(2),
                    edges[i],
                    edges[i + 1],
                    20_000,
                );
            }
            q += simpson(|x| chi2_pdf(x, dof).powi(2), upper, upper + 200.0, 200_000);
            let got = l2_divergence_detail(&d, dof).unwrap();
            assert!(
                (got.divergence - q.sqrt()).abs() < 1e-7,
                "dof {dof}: {} vs {}",
                got.divergence,
                q.sqrt()
            );
            let tail = simpson(|x| chi2_pdf(x, dof).powi(2), upper, upper + 200.0, 200_000);
            assert!((got.tail_contribution - tail).abs() < 1e-9);
        }
    }

    #[test]
    fn discretized_chi2_minimizes_divergence_on_its_grid() {
        for dof in [2u32, 4, 9] {
            let upper = chi2_quantile(0.999, dof).unwrap();
            let d = discretized_chi2(&equal_width_edges(upper, 37), dof);
            let best = l2_divergence(&d, dof).unwrap();
            for i in [0, 5, 20] {
                let mut p = d.clone();
                p.bin_heights[i] += 1e-3;
                assert!(l2_divergence(&p, dof).unwrap() > best);
            }
            let fine = discretized_chi2(&equal_width_edges(upper, 4000), dof);
            assert!(l2_divergence(&fine, dof).unwrap() < 0.01);
        }
    }

    #[test]
    fn no_overlap_approaches_chi2_norm() {
        let s = NeesSeries::new((0..600).map(|i| 1e6 + i as f64).collect(), 4).unwrap();
        let d = nees_divergence(&s, Binning::SqrtN).unwrap();
        assert!((d - 0.125f64.sqrt()).abs() < 1e-3, "{d}");
    }

    #[test]
    fn divergence_needs_dof_two() {
        let s = chi2_samples(100, 1, 1);
        assert!(nees_divergence(&s, Binning::SqrtN).is_err());
    }

    #[test]
    fn large_sample_matches_pdf_at_bin_centers() {
        let s = chi2_samples(1_000_000, 9, 7);
        let d = build_density(&s, Binning::Count(100)).unwrap();
        let n = s.len() as f64;
        let mut within3 = 0;
        for (i, c) in d.centers().iter().enumerate() {
            let w = d.width(i);
            // center value plus the midpoint-rule curvature correction p''·w²/24,
            // so the comparison is against the expected bin height
            let h = 1e-3;
            let curv = (chi2_pdf(c + h, 9) - 2.0 * chi2_pdf(*c, 9) + chi2_pdf(c - h, 9)) / (h * h);
            let p = chi2_pdf(*c, 9) + curv * w * w / 24.0;
            let se = (p * w * (1.0 - p * w) / n).sqrt() / w;
            let z = (d.bin_heights[i] - p).abs() / se.max(1e-12);
            assert!(z < 4.0, "bin {i}: z = {z}");
            if z < 3.0 {
                within3 += 1;
            }
        }
        assert!(within3 >= 98, "{within3} of 100 bins within 3 SE");
    }

    #[test]
    fn two_seeds_give_close_densities() {
        let a = build_density(&chi2_samples(1_000_000, 9, 1), Binning::Count(200)).unwrap();
        let b = chi2_samples(1_000_000, 9, 2);
        // histogram b on a's grid
        let mut counts = vec![0usize; a.bin_count()];
        let upper = *a.bin_edges.last().unwrap();
        for v in b.values() {
            if *v < upper {
                counts[(v / upper * a.bin_count() as f64) as usize] += 1;
            }
        }
        let mut sum = 0.0;
        for (i, c) in counts.iter().enumerate() {
            let hb = *c as f64 / (b.len() as f64 * a.width(i));
            sum += a.width(i) * (a.bin_heights[i] - hb).powi(2);
        }
        assert!(sum.sqrt() < 0.02);
        let da = l2_divergence(&a, 9).unwrap();
        let db = nees_divergence(&b, Binning::Count(200)).unwrap();
        assert!((da - db).abs() < 0.02);
    }

    #[test]
    fn resampled_divergence_is_seeded() {
        let s = chi2_samples(5000, 4, 3);
        let a = resampled_divergence(&s, 50, 200, Binning::SqrtN, 11).unwrap();
        let b = resampled_divergence(&s, 50, 200, Binning::SqrtN, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.std > 0.0 && a.mean > 0.0);
        assert!(resampled_divergence(&s, 1, 6000, Binning::SqrtN, 1).is_err());
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn divergence_is_permutation_invariant(seed in 0u64..1000, n in 10usize..500) {
            let s = chi2_samples(n, 3, seed);
            let mut shuffled = s.values().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let t = NeesSeries::new(shuffled, 3).unwrap();
            prop_assert_eq!(
                nees_divergence(&s, Binning::SqrtN).unwrap(),
                nees_divergence(&t, Binning::SqrtN).unwrap()
            );
        }
    }
}

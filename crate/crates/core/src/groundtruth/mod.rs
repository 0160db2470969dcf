//! Ground-truth covariances from Monte-Carlo repetition or from a sliding
//! window over a single run, plus the trajectory utilities needed to compute
//! errors against external ground truth.

mod align;
mod blocks;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::EstimateTrace;
use crate::statmath::{
    build_density, l2_divergence, nees, packed_len, Binning, CovMatrix, NeesSeries,
};

pub use align::{
    backdifference_velocity, horn_align, interpolate_positions, interpolate_rotations,
    rotation_difference, AlignmentTransform,
};
pub use blocks::{zero_mean_report, BlockMean, DiffRule, StateBlock, ZERO_MEAN_THRESHOLD};

/// Estimation errors `eₖ = xₖ − x̂ₖ` with their timestep indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    dim: usize,
    steps: Vec<usize>,
    errors: Vec<DVector<f64>>,
}

impl ErrorSeries {
    pub fn new(steps: Vec<usize>, errors: Vec<DVector<f64>>) -> Result<Self> {
        let first = errors.first().ok_or(Error::EmptyInput("error series"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid(
                "error vectors must have at least one component",
            ));
        }
        if steps.len() != errors.len() {
            return Err(Error::invalid(
                "one step index is required per error vector",
            ));
        }
        if errors.iter().any(|e| e.len() != dim) {
            return Err(Error::invalid("error vectors differ in dimension"));
        }
        if errors.iter().any(|e| e.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("error series has non-finite entries"));
        }
        Ok(Self { dim, steps, errors })
    }

    /// Steps numbered `0 … len − 1`.
    pub fn from_errors(errors: Vec<DVector<f64>>) -> Result<Self> {
        Self::new((0..errors.len()).collect(), errors)
    }

    pub fn from_trace(trace: &EstimateTrace) -> Result<Self> {
        Self::new(trace.records.iter().map(|r| r.k).collect(), trace.errors())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn errors(&self) -> &[DVector<f64>] {
        &self.errors
    }
}

/// Per-timestep ground-truth covariances; `None` where no estimate exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCovSeries {
    pub dim: usize,
    pub covariances: Vec<Option<CovMatrix>>,
}

impl GroundTruthCovSeries {
    pub fn len(&self) -> usize {
        self.covariances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariances.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.covariances.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.covariances.iter().filter(|c| c.is_some()).count()
    }

    /// `(index, covariance)` for valid timesteps.
    pub fn valid(&self) -> impl Iterator<Item = (usize, &CovMatrix)> {
        self.covariances
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
    }
}

fn add_outer(acc: &mut [f64], e: &DVector<f64>, sign: f64) {
    let n = e.len();
    let mut idx = 0;
    for i in 0..n {
        let s = sign * e[i];
        for j in i..n {
            acc[idx] += s * e[j];
            idx += 1;
        }
    }
}

/// `P̃ₖ = 1/(M−1) Σᵢ eₖᵢ eₖᵢᵀ` across runs, without mean subtraction.
pub fn mc_ground_truth(runs: &[ErrorSeries]) -> Result<GroundTruthCovSeries> {
    if runs.len() < 2 {
        return Err(Error::InsufficientRuns {
            required: 2,
            got: runs.len(),
        });
    }
    let (n, len) = (runs[0].dim, runs[0].len());
    if runs.iter().any(|r| r.dim != n || r.len() != len) {
        return Err(Error::invalid(
            "Monte-Carlo runs differ in length or dimension",
        ));
    }
    let scale = 1.0 / (runs.len() - 1) as f64;
    let covariances = (0..len)
        .map(|k| {
            let mut acc = vec![0.0; packed_len(n)];
            for run in runs {
                add_outer(&mut acc, &run.errors[k], 1.0);
            }
            acc.iter_mut().for_each(|v| *v *= scale);
            CovMatrix::from_upper(n, acc).map(Some)
        })
        .collect::<Result<_>>()?;
    Ok(GroundTruthCovSeries {
        dim: n,
        covariances,
    })
}

/// Centered sliding-window second moment with `1/(K−1)` normalization and no
/// mean subtraction. The first and last `⌊K/2⌋` steps have no full window and
/// are masked out.
#[allow(clippy::needless_range_loop)]
pub fn ergodic_ground_truth(errors: &ErrorSeries, window: usize) -> Result<GroundTruthCovSeries> {
    let len = errors.len();
    if window.is_multiple_of(2) || window < 3 || window > len {
        return Err(Error::InvalidWindow { window, len });
    }
    let n = errors.dim;
    let half = window / 2;
    let scale = 1.0 / (window - 1) as f64;
    let mut covariances = vec![None; len];

    let mut acc = vec![0.0; packed_len(n)];
    for e in &errors.errors[..window] {
        add_outer(&mut acc, e, 1.0);
    }
    for k in half..len - half {
        if k > half {
            // rebuild periodically so add/subtract roundoff cannot accumulate
            if (k - half).is_multiple_of(window) {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for e in &errors.errors[k - half..=k + half] {
                    add_outer(&mut acc, e, 1.0);
                }
            } else {
                add_outer(&mut acc, &errors.errors[k + half], 1.0);
                add_outer(&mut acc, &errors.errors[k - half - 1], -1.0);
            }
        }
        let p = acc.iter().map(|v| v * scale).collect();
        covariances[k] = Some(CovMatrix::from_upper(n, p)?);
    }
    Ok(GroundTruthCovSeries {
        dim: n,
        covariances,
    })
}

/// NEES of each error against the ground-truth covariance at valid steps.
pub fn ground_truth_nees(errors: &ErrorSeries, gt: &GroundTruthCovSeries) -> Result<NeesSeries> {
    if gt.len() != errors.len() || gt.dim != errors.dim {
        return Err(Error::invalid(
            "ground truth does not match the error series",
        ));
    }
    let values = gt
        .valid()
        .map(|(k, p)| nees(&errors.errors[k], p))
        .collect::<Result<_>>()?;
    NeesSeries::new(values, errors.dim as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window: usize,
    pub divergence: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSearch {
    pub best_window: usize,
    pub best_divergence: f64,
    pub table: Vec<WindowScore>,
}

/// Odd windows `lo, lo + 2, …, ≤ hi`.
pub fn odd_windows(lo: usize, hi: usize) -> Vec<usize> {
    let start = if lo.is_multiple_of(2) { lo + 1 } else { lo };
    (start.max(3)..=hi).step_by(2).collect()
}

/// Scores each candidate window by the divergence of the NEES pooled over all
/// sequences. Sequences shorter than a window do not contribute to it. Ties
/// go to the smaller window.
pub fn window_search(
    sequences: &[ErrorSeries],
    windows: &[usize],
    binning: Binning,
) -> Result<WindowSearch> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("window search sequences"));
    }
    if windows.is_empty() {
        return Err(Error::EmptyInput("window search candidates"));
    }
    let dim = sequences[0].dim;
    if sequences.iter().any(|s| s.dim != dim) {
        return Err(Error::invalid("sequences differ in dimension"));
    }
    let longest = sequences.iter().map(ErrorSeries::len).max().unwrap_or(0);
    let mut sorted = windows.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&w) = sorted.iter().find(|&&w| w % 2 == 0 || w < 3 || w > longest) {
        return Err(Error::InvalidWindow {
            window: w,
            len: longest,
        });
    }

    let table = sorted
        .par_iter()
        .map(|&window| {
            let per_seq = sequences
                .iter()
                .filter(|s| s.len() >= window)
                .map(|s| ground_truth_nees(s, &ergodic_ground_truth(s, window)?))
                .collect::<Result<Vec<_>>>()?;
            let pooled = NeesSeries::pooled(&per_seq)?;
            let divergence = l2_divergence(&build_density(&pooled, binning)?, pooled.dof())?;
            Ok(WindowScore {
                window,
                divergence,
                samples: pooled.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = table
        .iter()
        .fold(None::<&WindowScore>, |best, s| match best {
            Some(b) if b.divergence <= s.divergence => Some(b),
            _ => Some(s),
        })
        .expect("nonempty table");
    Ok(WindowSearch {
        best_window: best.window,
        best_divergence: best.divergence,
        table: table.clone(),
    })
}
